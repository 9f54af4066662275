use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Index mapping for a broadcasting binary op. A size-1 axis in either
/// operand is stretched to the other operand's size.
#[derive(Clone, Copy)]
struct Broadcast {
    out: Shape,
    sa: [usize; 4],
    sb: [usize; 4],
    same: bool,
}

fn strides(shape: Shape) -> [usize; 4] {
    [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ]
}

impl Broadcast {
    fn new(op: &'static str, a: Shape, b: Shape) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                out: a,
                sa: strides(a),
                sb: strides(b),
                same: true,
            });
        }
        let mut out = [0; 4];
        let (ta, tb) = (strides(a), strides(b));
        let mut sa = [0; 4];
        let mut sb = [0; 4];
        for d in 0..4 {
            out[d] = match (a[d], b[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
            };
            sa[d] = if a[d] == 1 { 0 } else { ta[d] };
            sb[d] = if b[d] == 1 { 0 } else { tb[d] };
        }
        Ok(Broadcast {
            out,
            sa,
            sb,
            same: false,
        })
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.same {
            for i in 0..crate::tensor::numel(self.out) {
                f(i, i, i);
            }
            return;
        }
        let [n, c, h, w] = self.out;
        let mut o = 0;
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let base_a = i0 * self.sa[0] + i1 * self.sa[1] + i2 * self.sa[2];
                    let base_b = i0 * self.sb[0] + i1 * self.sb[1] + i2 * self.sb[2];
                    for i3 in 0..w {
                        f(o, base_a + i3 * self.sa[3], base_b + i3 * self.sb[3]);
                        o += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'p> Graph<'p> {
    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Broadcast::new(name, av.shape(), bv.shape())?;
        let mut out = Tensor::zeros(plan.out);
        {
            let (x, y, o) = (av.data(), bv.data(), out.data_mut());
            match kind {
                BinaryKind::Add => plan.for_each(|k, i, j| o[k] = x[i] + y[j]),
                BinaryKind::Sub => plan.for_each(|k, i, j| o[k] = x[i] - y[j]),
                BinaryKind::Mul => plan.for_each(|k, i, j| o[k] = x[i] * y[j]),
                BinaryKind::Div => plan.for_each(|k, i, j| o[k] = x[i] / y[j]),
            }
        }
        Ok(self.push(out, &[a, b], move |g, sink| {
            let gd = g.data();
            if sink.wants(a) {
                let ga = sink.slot(a).data_mut();
                let y = bv.data();
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => plan.for_each(|k, i, _| ga[i] += gd[k]),
                    BinaryKind::Mul => plan.for_each(|k, i, j| ga[i] += gd[k] * y[j]),
                    BinaryKind::Div => plan.for_each(|k, i, j| ga[i] += gd[k] / y[j]),
                }
            }
            if sink.wants(b) {
                let gb = sink.slot(b).data_mut();
                let (x, y) = (av.data(), bv.data());
                match kind {
                    BinaryKind::Add => plan.for_each(|k, _, j| gb[j] += gd[k]),
                    BinaryKind::Sub => plan.for_each(|k, _, j| gb[j] -= gd[k]),
                    BinaryKind::Mul => plan.for_each(|k, i, j| gb[j] += gd[k] * x[i]),
                    BinaryKind::Div => {
                        plan.for_each(|k, i, j| gb[j] -= gd[k] * x[i] / (y[j] * y[j]))
                    }
                }
            }
        }))
    }

    /// Elementwise `a + b` with size-1 broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Unary op from a value function and a derivative expressed in terms
    /// of input `x` and output `y`.
    fn unary(
        &self,
        a: Var,
        f: impl Fn(Real) -> Real,
        df: impl Fn(Real, Real) -> Real + 'static,
    ) -> Var {
        let av = self.value(a);
        let out = av.map(f);
        let outv = std::rc::Rc::new(out.clone());
        self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for (((gi, &gv), &x), &y) in ga.iter_mut().zip(g.data()).zip(av.data()).zip(outv.data()) {
                *gi += gv * df(x, y);
            }
        })
    }

    pub fn scale(&self, a: Var, k: Real) -> Var {
        self.unary(a, |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, a: Var, k: Real) -> Var {
        self.unary(a, |x| x + k, |_, _| 1.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Real::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Real::exp, |_, y| y)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Real::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, a: Var, lo: Real, hi: Real) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Parametric ReLU with one slope per channel; `alpha` has shape `1 x C x 1 x 1`.
    pub fn prelu(&self, x: Var, alpha: Var) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(alpha));
        let [_, c, h, w] = xv.shape();
        if av.shape() != [1, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: xv.shape(),
                rhs: av.shape(),
            });
        }
        let plane = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for (i, (o, &v)) in out.data_mut().iter_mut().zip(xv.data()).enumerate() {
            let ch = (i / plane) % c;
            *o = if v > 0.0 { v } else { av.data()[ch] * v };
        }
        Ok(self.push(out, &[x, alpha], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.slot(x).data_mut();
                for (i, (gi, (&gv, &v))) in gx.iter_mut().zip(g.data().iter().zip(xv.data())).enumerate() {
                    let ch = (i / plane) % c;
                    *gi += if v > 0.0 { gv } else { av.data()[ch] * gv };
                }
            }
            if sink.wants(alpha) {
                let ga = sink.slot(alpha).data_mut();
                for (i, (&gv, &v)) in g.data().iter().zip(xv.data()).enumerate() {
                    if v <= 0.0 {
                        ga[(i / plane) % c] += gv * v;
                    }
                }
            }
        }))
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_definition() {
        let g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 1, 2], vec![-2.0, 3.0]).unwrap());
        let a = g.constant(Tensor::full([1, 1, 1, 1], 0.25));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 1, 1]));
        assert_eq!(g.value(g.sigmoid(x)).item(), 0.5);
        assert!((sigmoid(-800.0)).is_finite());
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn([1, 3, 2, 2], |_, c, y, x| (c * 4 + y * 2 + x) as Real), true);
        let s = g.leaf(Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).at(0, 2, 1, 1), 11.0 * 3.0);
        let grads = g.backward(g.sum(y)).unwrap();
        // d/ds_c = sum over the channel plane
        assert_eq!(grads.wrt(s).data(), &[6.0, 22.0, 38.0]);
        assert_eq!(grads.wrt(x).at(0, 1, 0, 0), 2.0);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros([1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 3, 3]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }
}
