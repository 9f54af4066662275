//! Horizontal disparity warping, partial correlation volumes and separable
//! resampling.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{apply_separable, apply_separable_adjoint, Resample};
use crate::tensor::{Real, Tensor};

/// Which way a disparity displaces the sampling position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleDirection {
    /// Sample at `x - d`: fetching right-view content for the left view.
    Minus,
    /// Sample at `x + d`: fetching left-view content for the right view.
    Plus,
}

impl SampleDirection {
    #[inline]
    fn sign(self) -> Real {
        match self {
            SampleDirection::Minus => -1.0,
            SampleDirection::Plus => 1.0,
        }
    }
}

/// Result of [`Graph::warp`].
pub struct WarpOutput {
    pub warped: Var,
    /// `N x 1 x H x W`, 1 where the sampling position lies inside the row.
    pub in_view: Tensor,
}

/// Linear-interpolation taps at continuous position `u` in a row of
/// length `w`: `(x0, t)` with the sample `(1-t)*row[x0] + t*row[x0+1]`.
#[inline]
fn taps(u: Real) -> (isize, Real) {
    let f = u.floor();
    (f as isize, u - f)
}

#[inline]
fn fetch(row: &[Real], i: isize) -> Real {
    if i >= 0 && (i as usize) < row.len() {
        row[i as usize]
    } else {
        0.0
    }
}

#[inline]
fn scatter(row: &mut [Real], i: isize, v: Real) {
    if i >= 0 && (i as usize) < row.len() {
        row[i as usize] += v;
    }
}

#[inline]
fn inside(u: Real, w: usize) -> bool {
    u >= 0.0 && u <= (w - 1) as Real
}

impl<'p> Graph<'p> {
    /// Bilinear horizontal warp: `out(c, y, x) = feat(c, y, x -/+ disp(y, x))`,
    /// zero outside the image. `disp` is `N x 1 x H x W`.
    pub fn warp(&self, feat: Var, disp: Var, dir: SampleDirection) -> Result<WarpOutput> {
        let (fv, dv) = (self.value(feat), self.value(disp));
        let [n, c, h, w] = fv.shape();
        if dv.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "warp",
                lhs: fv.shape(),
                rhs: dv.shape(),
            });
        }
        let sign = dir.sign();
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut in_view = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            for y in 0..h {
                let drow = &dv.data()[(b * h + y) * w..][..w];
                for x in 0..w {
                    let u = x as Real + sign * drow[x];
                    if inside(u, w) {
                        in_view.data_mut()[(b * h + y) * w + x] = 1.0;
                    }
                    let (x0, t) = taps(u);
                    for ch in 0..c {
                        let row = &fv.data()[((b * c + ch) * h + y) * w..][..w];
                        out.data_mut()[((b * c + ch) * h + y) * w + x] =
                            (1.0 - t) * fetch(row, x0) + t * fetch(row, x0 + 1);
                    }
                }
            }
        }
        let warped = self.push(out, &[feat, disp], move |g, sink| {
            let want_f = sink.wants(feat);
            let want_d = sink.wants(disp);
            let mut gf = if want_f { Tensor::zeros([n, c, h, w]) } else { Tensor::zeros([0, 0, 0, 0]) };
            let mut gd = if want_d { Tensor::zeros([n, 1, h, w]) } else { Tensor::zeros([0, 0, 0, 0]) };
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let di = (b * h + y) * w + x;
                        let u = x as Real + sign * dv.data()[di];
                        let (x0, t) = taps(u);
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let off = ((b * c + ch) * h + y) * w;
                            let gv = g.data()[off + x];
                            if want_f {
                                let grow = &mut gf.data_mut()[off..off + w];
                                scatter(grow, x0, (1.0 - t) * gv);
                                scatter(grow, x0 + 1, t * gv);
                            }
                            if want_d {
                                let row = &fv.data()[off..off + w];
                                acc += gv * (fetch(row, x0 + 1) - fetch(row, x0));
                            }
                        }
                        if want_d {
                            gd.data_mut()[di] = acc * sign;
                        }
                    }
                }
            }
            if want_f {
                sink.add(feat, gf);
            }
            if want_d {
                sink.add(disp, gd);
            }
        });
        Ok(WarpOutput { warped, in_view })
    }

    /// Partial correlation volume:
    /// `cost(j, y, x) = (1/C) * sum_c own(c, y, x) * other(c, y, x -/+ hyp(j, y, x))`
    /// with bilinear sampling of `other`, zero outside the image.
    /// `hyp` is `N x P x H x W`; output has the same shape.
    pub fn correlation(&self, own: Var, other: Var, hyp: Var, dir: SampleDirection) -> Result<Var> {
        let (ov, tv, hv) = (self.value(own), self.value(other), self.value(hyp));
        let [n, c, h, w] = ov.shape();
        if tv.shape() != ov.shape() {
            return Err(Error::ShapeMismatch {
                op: "correlation",
                lhs: ov.shape(),
                rhs: tv.shape(),
            });
        }
        let [hn, p, hh, hw] = hv.shape();
        if (hn, hh, hw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "correlation",
                lhs: ov.shape(),
                rhs: hv.shape(),
            });
        }
        let sign = dir.sign();
        let inv_c = 1.0 / c as Real;
        let mut out = Tensor::zeros([n, p, h, w]);
        for b in 0..n {
            for j in 0..p {
                for y in 0..h {
                    for x in 0..w {
                        let oi = ((b * p + j) * h + y) * w + x;
                        let (x0, t) = taps(x as Real + sign * hv.data()[oi]);
                        let mut s = 0.0;
                        for ch in 0..c {
                            let off = ((b * c + ch) * h + y) * w;
                            let row = &tv.data()[off..off + w];
                            s += ov.data()[off + x] * ((1.0 - t) * fetch(row, x0) + t * fetch(row, x0 + 1));
                        }
                        out.data_mut()[oi] = s * inv_c;
                    }
                }
            }
        }
        Ok(self.push(out, &[own, other, hyp], move |g, sink| {
            let (wo, wt, wh) = (sink.wants(own), sink.wants(other), sink.wants(hyp));
            let mut go = Tensor::zeros(if wo { [n, c, h, w] } else { [0; 4] });
            let mut gt = Tensor::zeros(if wt { [n, c, h, w] } else { [0; 4] });
            let mut gh = Tensor::zeros(if wh { [n, p, h, w] } else { [0; 4] });
            for b in 0..n {
                for j in 0..p {
                    for y in 0..h {
                        for x in 0..w {
                            let oi = ((b * p + j) * h + y) * w + x;
                            let gv = g.data()[oi] * inv_c;
                            if gv == 0.0 {
                                continue;
                            }
                            let (x0, t) = taps(x as Real + sign * hv.data()[oi]);
                            let mut dh = 0.0;
                            for ch in 0..c {
                                let off = ((b * c + ch) * h + y) * w;
                                let row = &tv.data()[off..off + w];
                                let a = fetch(row, x0);
                                let bb = fetch(row, x0 + 1);
                                let ov_x = ov.data()[off + x];
                                if wo {
                                    go.data_mut()[off + x] += gv * ((1.0 - t) * a + t * bb);
                                }
                                if wt {
                                    let grow = &mut gt.data_mut()[off..off + w];
                                    scatter(grow, x0, gv * ov_x * (1.0 - t));
                                    scatter(grow, x0 + 1, gv * ov_x * t);
                                }
                                dh += ov_x * (bb - a);
                            }
                            if wh {
                                gh.data_mut()[oi] += gv * dh * sign;
                            }
                        }
                    }
                }
            }
            if wo {
                sink.add(own, go);
            }
            if wt {
                sink.add(other, gt);
            }
            if wh {
                sink.add(hyp, gh);
            }
        }))
    }

    /// Separable linear resampling of every plane: `ry * x * rx^T`.
    pub fn resample(&self, a: Var, ry: Rc<Resample>, rx: Rc<Resample>) -> Result<Var> {
        let [_, _, h, w] = self.shape(a);
        if h != ry.in_len || w != rx.in_len {
            return Err(Error::invalid(
                "resample",
                format!(
                    "operator expects {}x{} input, got {h}x{w}",
                    ry.in_len, rx.in_len
                ),
            ));
        }
        let out = apply_separable(&self.value(a), &ry, &rx);
        Ok(self.push(out, &[a], move |g, sink| {
            sink.add(a, apply_separable_adjoint(g, &ry, &rx));
        }))
    }
}
