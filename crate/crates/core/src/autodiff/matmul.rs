use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::{Real, Tensor};

impl<'p> Graph<'p> {
    /// Batched matrix product over the two leading axes:
    /// `[A, B, M, K] x [A, B, K, N] -> [A, B, M, N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [p0, p1, m, k] = av.shape();
        let [q0, q1, k2, n] = bv.shape();
        if (p0, p1, k) != (q0, q1, k2) {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let batches = p0 * p1;
        let mut out = Tensor::zeros([p0, p1, m, n]);
        for i in 0..batches {
            gemm(
                Mat::row_major(&av.data()[i * m * k..(i + 1) * m * k], m, k),
                Mat::row_major(&bv.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(out, &[a, b], move |g, sink| {
            if sink.wants(a) {
                let ga = sink.slot(a).data_mut();
                for i in 0..batches {
                    gemm(
                        Mat::row_major(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                        Mat::row_major(&bv.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            }
            if sink.wants(b) {
                let gb = sink.slot(b).data_mut();
                for i in 0..batches {
                    gemm(
                        Mat::row_major(&av.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                        Mat::row_major(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        1.0,
                    );
                }
            }
        }))
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        let av = self.value(a);
        let shape = av.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Tensor::zeros(shape);
        {
            let (x, y) = (av.data(), out.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = Real::NEG_INFINITY;
                    for k in 0..len {
                        mx = mx.max(x[base + k * inner]);
                    }
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (x[base + k * inner] - mx).exp();
                        y[base + k * inner] = e;
                        total += e;
                    }
                    for k in 0..len {
                        y[base + k * inner] /= total;
                    }
                }
            }
        }
        let yv = std::rc::Rc::new(out.clone());
        Ok(self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            let (y, gd) = (yv.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for k in 0..len {
                        dot += gd[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..len {
                        let j = base + k * inner;
                        ga[j] += y[j] * (gd[j] - dot);
                    }
                }
            }
        }))
    }
}
