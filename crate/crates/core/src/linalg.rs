//! Dense matrix products and separable resampling operators.

use crate::tensor::{Real, Tensor};

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Mat<'a> {
    pub data: &'a [Real],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [Real], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "matrix view out of bounds"
        );
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub fn gemm(a: Mat, b: Mat, c: &mut [Real], beta: Real) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    a.check();
    b.check();
    // SAFETY: the views were bounds-checked above and `c` holds m*n values
    // laid out with row stride n.
    unsafe {
        gemm_raw(m, k, n, a, b, c.as_mut_ptr(), beta);
    }
}

#[cfg(not(feature = "f32"))]
unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: *mut Real, beta: Real) {
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.data.as_ptr(),
        a.rs,
        a.cs,
        b.data.as_ptr(),
        b.rs,
        b.cs,
        beta,
        c,
        n as isize,
        1,
    );
}

#[cfg(feature = "f32")]
unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: *mut Real, beta: Real) {
    matrixmultiply::sgemm(
        m,
        k,
        n,
        1.0,
        a.data.as_ptr(),
        a.rs,
        a.cs,
        b.data.as_ptr(),
        b.rs,
        b.cs,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Mirror an out-of-range index back into `0..n` (edge sample not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: Real, a: Real) -> Real {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

pub const BICUBIC_A: Real = -0.5;

/// Dense 1-D linear resampling operator, `out_len x in_len`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample {
    pub out_len: usize,
    pub in_len: usize,
    pub weights: Vec<Real>,
}

impl Resample {
    fn from_taps(out_len: usize, in_len: usize, taps: impl Fn(usize) -> Vec<(usize, Real)>) -> Self {
        let mut weights = vec![0.0; out_len * in_len];
        for i in 0..out_len {
            for (j, w) in taps(i) {
                weights[i * in_len + j] += w;
            }
        }
        Resample {
            out_len,
            in_len,
            weights,
        }
    }

    /// Bicubic upsampling by an integer factor, half-pixel aligned, reflect boundary.
    pub fn bicubic_up(in_len: usize, scale: usize) -> Self {
        let s = scale as Real;
        Self::from_taps(in_len * scale, in_len, |i| {
            let src = (i as Real + 0.5) / s - 0.5;
            let base = src.floor() as isize;
            (base - 1..=base + 2)
                .map(|j| (reflect_index(j, in_len), cubic_kernel(src - j as Real, BICUBIC_A)))
                .collect()
        })
    }

    /// Antialiased bicubic downsampling by an integer factor (kernel stretched by `scale`).
    pub fn bicubic_down(in_len: usize, scale: usize) -> Self {
        let s = scale as Real;
        let out_len = in_len / scale;
        Self::from_taps(out_len, in_len, |i| {
            let center = (i as Real + 0.5) * s - 0.5;
            let lo = (center - 2.0 * s).ceil() as isize;
            let hi = (center + 2.0 * s).floor() as isize;
            let raw: Vec<(isize, Real)> = (lo..=hi)
                .map(|j| (j, cubic_kernel((center - j as Real) / s, BICUBIC_A)))
                .collect();
            let total: Real = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter()
                .map(|(j, w)| (reflect_index(j, in_len), w / total))
                .collect()
        })
    }

    /// Bilinear upsampling by an integer factor, half-pixel aligned, edge clamped.
    pub fn bilinear_up(in_len: usize, scale: usize) -> Self {
        let s = scale as Real;
        Self::from_taps(in_len * scale, in_len, |i| {
            let src = ((i as Real + 0.5) / s - 0.5).max(0.0);
            let x0 = (src.floor() as usize).min(in_len - 1);
            let x1 = (x0 + 1).min(in_len - 1);
            let t = src - x0 as Real;
            vec![(x0, 1.0 - t), (x1, t)]
        })
    }

    pub fn mat(&self) -> Mat<'_> {
        Mat::row_major(&self.weights, self.out_len, self.in_len)
    }
}

/// `out[n, c] = ry * x[n, c] * rx^T` for every plane.
pub fn apply_separable(x: &Tensor, ry: &Resample, rx: &Resample) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert_eq!(h, ry.in_len);
    assert_eq!(w, rx.in_len);
    let (oh, ow) = (ry.out_len, rx.out_len);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![0.0; h * ow];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        gemm(Mat::row_major(plane, h, w), rx.mat().t(), &mut tmp, 0.0);
        gemm(
            ry.mat(),
            Mat::row_major(&tmp, h, ow),
            &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow],
            0.0,
        );
    }
    out
}

/// Adjoint of [`apply_separable`]: `ry^T * g * rx`.
pub fn apply_separable_adjoint(g: &Tensor, ry: &Resample, rx: &Resample) -> Tensor {
    let [n, c, oh, ow] = g.shape();
    assert_eq!(oh, ry.out_len);
    assert_eq!(ow, rx.out_len);
    let (h, w) = (ry.in_len, rx.in_len);
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut tmp = vec![0.0; oh * w];
    for p in 0..n * c {
        let plane = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        gemm(Mat::row_major(plane, oh, ow), rx.mat(), &mut tmp, 0.0);
        gemm(
            ry.mat().t(),
            Mat::row_major(&tmp, oh, w),
            &mut out.data_mut()[p * h * w..(p + 1) * h * w],
            0.0,
        );
    }
    out
}
