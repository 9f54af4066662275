//! Convolutions (im2col + GEMM) and window pooling.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, reflect_index, Mat};
use crate::parallel;
use crate::tensor::{Real, Tensor};

/// How a convolution samples outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PaddingMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

/// Output length of a convolution along one axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

const OUTSIDE: usize = usize::MAX;

/// Source pixel of every (kernel tap, output position) pair.
struct Geometry {
    kk: usize,
    plane_in: usize,
    positions: usize,
    oh: usize,
    ow: usize,
    /// `kk x positions`, `OUTSIDE` for zero padding.
    src: Vec<usize>,
    identity: bool,
}

impl Geometry {
    fn new(
        op: &'static str,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PaddingMode,
    ) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid(op, "kernel and stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                op,
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        if mode == PaddingMode::Reflect && pad > 0 && (pad >= h || pad >= w) {
            return Err(Error::invalid(
                op,
                format!("reflect padding {pad} needs input larger than {h}x{w}"),
            ));
        }
        let oh = conv_output_len(h, k, stride, pad);
        let ow = conv_output_len(w, k, stride, pad);
        let positions = oh * ow;
        let mut src = vec![OUTSIDE; k * k * positions];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut src[(ky * k + kx) * positions..(ky * k + kx + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                        row[oy * ow + ox] = if inside {
                            iy as usize * w + ix as usize
                        } else if mode == PaddingMode::Reflect {
                            reflect_index(iy, h) * w + reflect_index(ix, w)
                        } else {
                            OUTSIDE
                        };
                    }
                }
            }
        }
        Ok(Geometry {
            kk: k * k,
            plane_in: h * w,
            positions,
            oh,
            ow,
            src,
            identity: k == 1 && stride == 1 && pad == 0,
        })
    }

    /// `col[(c*kk + t) * positions + p] = x[c, src[t, p]]`.
    fn im2col(&self, x: &[Real], channels: usize, col: &mut [Real]) {
        for c in 0..channels {
            let plane = &x[c * self.plane_in..(c + 1) * self.plane_in];
            for t in 0..self.kk {
                let dst = &mut col[(c * self.kk + t) * self.positions..][..self.positions];
                let idx = &self.src[t * self.positions..(t + 1) * self.positions];
                for (d, &s) in dst.iter_mut().zip(idx) {
                    *d = if s == OUTSIDE { 0.0 } else { plane[s] };
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`], accumulating into `x`.
    fn col2im(&self, col: &[Real], channels: usize, x: &mut [Real]) {
        for c in 0..channels {
            let plane = &mut x[c * self.plane_in..(c + 1) * self.plane_in];
            for t in 0..self.kk {
                let srcv = &col[(c * self.kk + t) * self.positions..][..self.positions];
                let idx = &self.src[t * self.positions..(t + 1) * self.positions];
                for (&v, &s) in srcv.iter().zip(idx) {
                    if s != OUTSIDE {
                        plane[s] += v;
                    }
                }
            }
        }
    }

    /// Column matrix for one sample, borrowing the input when the
    /// convolution is a plain 1x1.
    fn columns<'a>(&self, x: &'a [Real], channels: usize, buf: &'a mut Vec<Real>) -> &'a [Real] {
        if self.identity {
            return x;
        }
        buf.resize(channels * self.kk * self.positions, 0.0);
        self.im2col(x, channels, buf);
        buf
    }
}

fn check_bias(op: &'static str, g: &Graph, b: Option<Var>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        let s = g.shape(b);
        if s != [1, cout, 1, 1] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: [1, cout, 1, 1],
                rhs: s,
            });
        }
    }
    Ok(())
}

fn add_bias(out: &mut Tensor, bias: &Tensor) {
    let [_, c, h, w] = out.shape();
    let plane = h * w;
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[p % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let [n, c, h, w] = g.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let s: Real = g.data()[(b * c + ch) * plane..][..plane].iter().sum();
            out.data_mut()[ch] += s;
        }
    }
    out
}

impl<'p> Graph<'p> {
    /// 2-D convolution. `w` is `Cout x Cin x k x k`, `b` is `1 x Cout x 1 x 1`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PaddingMode,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, k, k2] = wv.shape();
        if wcin != cin || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape(),
                rhs: wv.shape(),
            });
        }
        check_bias("conv2d", self, b, cout)?;
        let geo = Geometry::new("conv2d", h, wd, k, stride, pad, mode)?;
        let (oh, ow, pos) = (geo.oh, geo.ow, geo.positions);
        let inner = cin * geo.kk;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        {
            let xd = xv.data();
            let wm = Mat::row_major(wv.data(), cout, inner);
            parallel::for_each_chunk_mut(out.data_mut(), cout * pos, |i, dst| {
                let mut buf = Vec::new();
                let col = geo.columns(&xd[i * cin * h * wd..(i + 1) * cin * h * wd], cin, &mut buf);
                gemm(wm, Mat::row_major(col, inner, pos), dst, 0.0);
            });
        }
        if let Some(b) = b {
            add_bias(&mut out, &self.value(b));
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, &inputs, move |g, sink| {
            let plane = cin * h * wd;
            let wm = Mat::row_major(wv.data(), cout, inner);
            let want_w = sink.wants(w);
            let want_x = sink.wants(x);
            let mut gw = if want_w { vec![0.0; cout * inner] } else { Vec::new() };
            let mut gx = if want_x { vec![0.0; n * plane] } else { Vec::new() };
            let mut buf = Vec::new();
            let mut dcol = vec![0.0; if want_x { inner * pos } else { 0 }];
            for i in 0..n {
                let gout = Mat::row_major(&g.data()[i * cout * pos..(i + 1) * cout * pos], cout, pos);
                if want_w {
                    let col = geo.columns(&xv.data()[i * plane..(i + 1) * plane], cin, &mut buf);
                    gemm(gout, Mat::row_major(col, inner, pos).t(), &mut gw, 1.0);
                }
                if want_x {
                    let dst = &mut gx[i * plane..(i + 1) * plane];
                    if geo.identity {
                        gemm(wm.t(), gout, dst, 1.0);
                    } else {
                        gemm(wm.t(), gout, &mut dcol, 0.0);
                        geo.col2im(&dcol, cin, dst);
                    }
                }
            }
            if want_w {
                sink.add(w, Tensor::new([cout, cin, k, k], gw).expect("sized"));
            }
            if want_x {
                sink.add(x, Tensor::new([n, cin, h, wd], gx).expect("sized"));
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    sink.add(b, bias_grad(g));
                }
            }
        }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with zero
    /// padding. `w` is `Cin x Cout x k x k`; output side is
    /// `(len - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, cin, h, wd] = xv.shape();
        let [wcin, cout, k, k2] = wv.shape();
        if wcin != cin || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xv.shape(),
                rhs: wv.shape(),
            });
        }
        check_bias("conv_transpose2d", self, b, cout)?;
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "padding exceeds output"))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "padding exceeds output"))?;
        let geo = Geometry::new("conv_transpose2d", oh, ow, k, stride, pad, PaddingMode::Zero)?;
        debug_assert_eq!((geo.oh, geo.ow), (h, wd));
        let pos = h * wd;
        let inner = cout * geo.kk;
        let out_plane = cout * oh * ow;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        {
            let xd = xv.data();
            let wm = Mat::row_major(wv.data(), cin, inner);
            parallel::for_each_chunk_mut(out.data_mut(), out_plane, |i, dst| {
                let mut col = vec![0.0; inner * pos];
                let xm = Mat::row_major(&xd[i * cin * pos..(i + 1) * cin * pos], cin, pos);
                gemm(wm.t(), xm, &mut col, 0.0);
                geo.col2im(&col, cout, dst);
            });
        }
        if let Some(b) = b {
            add_bias(&mut out, &self.value(b));
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, &inputs, move |g, sink| {
            let wm = Mat::row_major(wv.data(), cin, inner);
            let want_w = sink.wants(w);
            let want_x = sink.wants(x);
            let mut gw = if want_w { vec![0.0; cin * inner] } else { Vec::new() };
            let mut gx = if want_x { vec![0.0; n * cin * pos] } else { Vec::new() };
            let mut col = vec![0.0; inner * pos];
            for i in 0..n {
                geo.im2col(&g.data()[i * out_plane..(i + 1) * out_plane], cout, &mut col);
                let cm = Mat::row_major(&col, inner, pos);
                if want_x {
                    gemm(wm, cm, &mut gx[i * cin * pos..(i + 1) * cin * pos], 0.0);
                }
                if want_w {
                    let xm = Mat::row_major(&xv.data()[i * cin * pos..(i + 1) * cin * pos], cin, pos);
                    gemm(xm, cm.t(), &mut gw, 1.0);
                }
            }
            if want_w {
                sink.add(w, Tensor::new([cin, cout, k, k], gw).expect("sized"));
            }
            if want_x {
                sink.add(x, Tensor::new([n, cin, h, wd], gx).expect("sized"));
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    sink.add(b, bias_grad(g));
                }
            }
        }))
    }

    fn window_pool(&self, a: Var, wy: Vec<(usize, usize)>, wx: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let (oh, ow) = (wy.len(), wx.len());
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let plane = &av.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1)) in wy.iter().enumerate() {
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<Real>();
                    }
                    out.data_mut()[(p * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as Real;
                }
            }
        }
        self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for p in 0..n * c {
                for (oy, &(y0, y1)) in wy.iter().enumerate() {
                    for (ox, &(x0, x1)) in wx.iter().enumerate() {
                        let v = g.data()[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as Real;
                        for y in y0..y1 {
                            for gv in &mut ga[p * h * w + y * w + x0..p * h * w + y * w + x1] {
                                *gv += v;
                            }
                        }
                    }
                }
            }
        })
    }

    /// Non-overlapping `k x k` average pooling; trailing partial windows are
    /// kept and averaged over the pixels they contain.
    pub fn avg_pool(&self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::invalid("avg_pool", "window must be positive"));
        }
        let [_, _, h, w] = self.shape(a);
        let win = |len: usize| -> Vec<(usize, usize)> {
            (0..len.div_ceil(k)).map(|i| (i * k, (i * k + k).min(len))).collect()
        };
        Ok(self.window_pool(a, win(h), win(w)))
    }

    /// Average pooling onto an `out x out` grid with bins
    /// `[floor(i*len/out), ceil((i+1)*len/out))`.
    pub fn adaptive_avg_pool(&self, a: Var, out: usize) -> Result<Var> {
        let [_, _, h, w] = self.shape(a);
        if out == 0 || out > h || out > w {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                format!("cannot pool {h}x{w} onto {out}x{out}"),
            ));
        }
        let bins = |len: usize| -> Vec<(usize, usize)> {
            (0..out)
                .map(|i| (i * len / out, ((i + 1) * len).div_ceil(out)))
                .collect()
        };
        Ok(self.window_pool(a, bins(h), bins(w)))
    }
}

/// Axis of a [`Graph::filter1d`] pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterAxis {
    /// Along each row (width).
    Horizontal,
    /// Along each column (height).
    Vertical,
}

impl<'p> Graph<'p> {
    /// 1-D correlation of every row or column with `taps`:
    /// `out[i] = sum_t taps[t] * x[i + t - pad]`, with out-of-range samples
    /// zero or reflected. Length along `axis` becomes `len + 2 * pad - k + 1`.
    /// Two passes give a separable 2-D filter at `2k` instead of `k^2` taps.
    pub fn filter1d(&self, a: Var, taps: &[Real], axis: FilterAxis, pad: usize, mode: PaddingMode) -> Result<Var> {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let len = match axis {
            FilterAxis::Horizontal => w,
            FilterAxis::Vertical => h,
        };
        let k = taps.len();
        if k == 0 || len + 2 * pad < k {
            return Err(Error::invalid(
                "filter1d",
                format!("{k} taps do not fit length {len} with padding {pad}"),
            ));
        }
        if mode == PaddingMode::Reflect && pad > 0 && pad >= len {
            return Err(Error::invalid("filter1d", format!("reflect padding {pad} needs length above {len}")));
        }
        let out_len = len + 2 * pad - k + 1;
        // src[o * k + t]: input index feeding tap t of output o
        let src: Vec<usize> = (0..out_len * k)
            .map(|j| {
                let i = (j / k + j % k) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    i as usize
                } else if mode == PaddingMode::Reflect {
                    reflect_index(i, len)
                } else {
                    OUTSIDE
                }
            })
            .collect();
        let taps: Vec<Real> = taps.to_vec();
        let (oh, ow) = match axis {
            FilterAxis::Horizontal => (h, out_len),
            FilterAxis::Vertical => (out_len, w),
        };
        let mut out = Tensor::zeros([n, c, oh, ow]);
        {
            let x = av.data();
            let o = out.data_mut();
            for p in 0..n * c {
                let plane = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut o[p * oh * ow..(p + 1) * oh * ow];
                match axis {
                    FilterAxis::Horizontal => {
                        for y in 0..h {
                            let row = &plane[y * w..(y + 1) * w];
                            for (i, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (t, &s) in taps.iter().zip(&src[i * k..(i + 1) * k]) {
                                    if s != OUTSIDE {
                                        acc += t * row[s];
                                    }
                                }
                                *d = acc;
                            }
                        }
                    }
                    FilterAxis::Vertical => {
                        for i in 0..oh {
                            let drow = &mut dst[i * w..(i + 1) * w];
                            for (t, &s) in taps.iter().zip(&src[i * k..(i + 1) * k]) {
                                if s == OUTSIDE {
                                    continue;
                                }
                                for (d, v) in drow.iter_mut().zip(&plane[s * w..(s + 1) * w]) {
                                    *d += t * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, &[a], move |g, sink| {
            let gd = g.data();
            let ga = sink.slot(a).data_mut();
            for p in 0..n * c {
                let gplane = &gd[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut ga[p * h * w..(p + 1) * h * w];
                match axis {
                    FilterAxis::Horizontal => {
                        for y in 0..h {
                            let drow = &mut dst[y * w..(y + 1) * w];
                            for (i, &gv) in gplane[y * ow..(y + 1) * ow].iter().enumerate() {
                                for (t, &s) in taps.iter().zip(&src[i * k..(i + 1) * k]) {
                                    if s != OUTSIDE {
                                        drow[s] += t * gv;
                                    }
                                }
                            }
                        }
                    }
                    FilterAxis::Vertical => {
                        for i in 0..oh {
                            let grow = &gplane[i * w..(i + 1) * w];
                            for (t, &s) in taps.iter().zip(&src[i * k..(i + 1) * k]) {
                                if s == OUTSIDE {
                                    continue;
                                }
                                for (d, v) in dst[s * w..(s + 1) * w].iter_mut().zip(grow) {
                                    *d += t * v;
                                }
                            }
                        }
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, mode: PaddingMode) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let oh = conv_output_len(h, k, stride, pad);
        let ow = conv_output_len(wd, k, stride, pad);
        Tensor::from_fn([n, cout, oh, ow], |b, co, oy, ox| {
            let mut s = 0.0;
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            x.at(b, ci, iy as usize, ix as usize)
                        } else if mode == PaddingMode::Reflect {
                            x.at(b, ci, reflect_index(iy, h), reflect_index(ix, wd))
                        } else {
                            0.0
                        };
                        s += v * w.at(co, ci, ky, kx);
                    }
                }
            }
            s
        })
    }

    fn sample(shape: crate::tensor::Shape, seed: Real) -> Tensor {
        Tensor::from_fn(shape, |a, b, c, d| {
            ((a * 7 + b * 13 + c * 3 + d * 5) as Real * 0.37 + seed).sin()
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, stride, pad, mode) in [
            (3, 1, 1, PaddingMode::Zero),
            (3, 2, 1, PaddingMode::Zero),
            (3, 1, 1, PaddingMode::Reflect),
            (1, 1, 0, PaddingMode::Zero),
            (4, 2, 1, PaddingMode::Zero),
        ] {
            let x = sample([2, 3, 5, 7], 0.1);
            let w = sample([4, 3, k, k], 0.7);
            let g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, None, stride, pad, mode).unwrap();
            let want = naive_conv(&x, &w, stride, pad, mode);
            assert!(g.value(y).max_abs_diff(&want) < 1e-12, "k={k} s={stride} {mode:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> must equal <x, conv^T(g)> and be linear in w.
        for (k, stride, pad, mode) in [(3, 1, 1, PaddingMode::Reflect), (3, 2, 1, PaddingMode::Zero), (1, 1, 0, PaddingMode::Zero)] {
            let x = sample([2, 2, 6, 5], 0.3);
            let w = sample([3, 2, k, k], 1.1);
            let g = Graph::new();
            let (xv, wv) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true));
            let y = g.conv2d(xv, wv, None, stride, pad, mode).unwrap();
            let probe = sample(g.shape(y), 2.0);
            let loss = g.sum(g.mul(y, g.constant(probe.clone())).unwrap());
            let grads = g.backward(loss).unwrap();
            let lhs = g.value(y).dot(&probe);
            assert!((lhs - x.dot(&grads.wrt(xv))).abs() < 1e-10);
            assert!((lhs - w.dot(&grads.wrt(wv))).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let x = sample([1, 3, 4, 5], 0.2);
        let w = sample([3, 2, 4, 4], 0.9);
        let g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone(), true), g.constant(w.clone()));
        let y = g.conv_transpose2d(xv, wv, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), [1, 2, 8, 10]);
        // <convT(x), z> == <x, conv(z)> with the same weight viewed as Cout=3, Cin=2
        let z = sample([1, 2, 8, 10], 1.7);
        let zc = naive_conv(&z, &w, 2, 1, PaddingMode::Zero);
        assert!((g.value(y).dot(&z) - x.dot(&zc)).abs() < 1e-10);
        let loss = g.sum(g.mul(y, g.constant(z)).unwrap());
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(xv).max_abs_diff(&zc) < 1e-10);
    }

    #[test]
    fn bias_adds_per_channel() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([2, 1, 3, 3]));
        let b = g.leaf(Tensor::new([1, 2, 1, 1], vec![0.5, -1.0]).unwrap(), true);
        let y = g.conv2d(x, w, Some(b), 1, 1, PaddingMode::Zero).unwrap();
        assert_eq!(g.value(y).at(0, 1, 2, 2), -1.0);
        let grads = g.backward(g.sum(y)).unwrap();
        assert_eq!(grads.wrt(b).data(), &[9.0, 9.0]);
    }

    #[test]
    fn avg_pool_partial_windows() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as Real), true);
        let p = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.shape(p), [1, 1, 2, 2]);
        assert_eq!(g.value(p).data(), &[2.0, 3.5, 6.5, 8.0]);
        let grads = g.backward(g.sum(p)).unwrap();
        assert_eq!(grads.wrt(x).at(0, 0, 2, 2), 1.0);
        assert_eq!(grads.wrt(x).at(0, 0, 0, 0), 0.25);
    }

    #[test]
    fn adaptive_pool_to_one_is_global_mean() {
        let g = Graph::new();
        let t = Tensor::from_fn([1, 2, 5, 3], |_, c, y, x| (c * 15 + y * 3 + x) as Real);
        let x = g.constant(t);
        let p = g.adaptive_avg_pool(x, 1).unwrap();
        assert_eq!(g.value(p).data(), &[7.0, 22.0]);
        let q = g.adaptive_avg_pool(x, 2).unwrap();
        // rows [0,3) and [2,5), cols [0,2) and [1,3)
        assert_eq!(g.value(q).at(0, 0, 1, 1), (7.0 + 8.0 + 10.0 + 11.0 + 13.0 + 14.0) / 6.0);
    }

    #[test]
    fn separable_filter_matches_outer_product_conv() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::rand_uniform([2, 2, 7, 9], -1.0, 1.0, &mut rng);
        let taps = [0.2, -0.5, 1.0, 0.3, 0.7];
        let kernel = Tensor::from_fn([1, 1, 5, 5], |_, _, y, x| taps[y] * taps[x]);
        for (pad, mode) in [(2, PaddingMode::Reflect), (2, PaddingMode::Zero), (0, PaddingMode::Zero), (1, PaddingMode::Reflect)] {
            let g = Graph::new();
            let planes = g.constant(x.clone().reshape([4, 1, 7, 9]).unwrap());
            let rows = g.filter1d(planes, &taps, FilterAxis::Horizontal, pad, mode).unwrap();
            let sep = g.filter1d(rows, &taps, FilterAxis::Vertical, pad, mode).unwrap();
            let full = g.conv2d(planes, g.constant(kernel.clone()), None, 1, pad, mode).unwrap();
            assert_eq!(g.shape(sep), g.shape(full));
            assert!(g.value(sep).max_abs_diff(&g.value(full)) < 1e-14, "{pad} {mode:?}");
        }
        let g = Graph::new();
        assert!(g.filter1d(g.constant(x.clone()), &taps, FilterAxis::Vertical, 7, PaddingMode::Reflect).is_err());
    }
}
