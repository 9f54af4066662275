use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

impl<'p> Graph<'p> {
    /// Sum of all elements, as a `1x1x1x1` scalar.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let total = av.sum();
        self.push(Tensor::scalar(total), &[a], move |g, sink| {
            let gv = g.item();
            for v in sink.slot(a).data_mut() {
                *v += gv;
            }
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = numel(self.shape(a)) as Real;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let av = self.value(a);
        let shape = av.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(out_shape);
        {
            let (src, dst) = (av.data(), out.data_mut());
            for o in 0..outer {
                for k in 0..len {
                    let s = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (d, &v) in dst[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
        Ok(self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            let gd = g.data();
            for o in 0..outer {
                for k in 0..len {
                    let dst = &mut ga[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                        *d += v;
                    }
                }
            }
        }))
    }

    /// Global average pooling: `N x C x H x W -> N x C x 1 x 1`.
    pub fn mean_hw(&self, a: Var) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let plane = h * w;
        let inv = 1.0 / plane as Real;
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for (p, o) in out.data_mut().iter_mut().enumerate() {
            *o = av.data()[p * plane..(p + 1) * plane].iter().sum::<Real>() * inv;
        }
        self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for (p, &gv) in g.data().iter().enumerate() {
                for v in &mut ga[p * plane..(p + 1) * plane] {
                    *v += gv * inv;
                }
            }
        })
    }

    /// `sum(x * w) / sum(w)` with `w` treated as a constant weight map
    /// broadcast over `x`. Returns zero when the weights sum to zero.
    pub fn weighted_mean(&self, x: Var, weights: &Tensor) -> Result<Var> {
        let denom = {
            // broadcast the weights to x's shape to count each weighted element
            let xs = self.shape(x);
            let ws = weights.shape();
            let mut factor = 1.0;
            for d in 0..4 {
                if ws[d] == 1 && xs[d] != 1 {
                    factor *= xs[d] as Real;
                } else if ws[d] != xs[d] {
                    return Err(Error::ShapeMismatch {
                        op: "weighted_mean",
                        lhs: xs,
                        rhs: ws,
                    });
                }
            }
            weights.sum() * factor
        };
        let w = self.constant(weights.clone());
        let prod = self.mul(x, w)?;
        let s = self.sum(prod);
        if denom <= 0.0 {
            return Ok(self.scale(s, 0.0));
        }
        Ok(self.scale(s, 1.0 / denom))
    }
}
