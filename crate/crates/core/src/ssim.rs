//! Structural similarity on the tape. The metric and the reconstruction
//! loss both go through [`ssim_map`], so they share one kernel.

use crate::autodiff::{FilterAxis, Graph, PaddingMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WINDOW: usize = 11;
pub const SIGMA: Real = 1.5;
pub const K1: Real = 0.01;
pub const K2: Real = 0.03;

/// Normalized 1-D Gaussian; the window is its outer product with itself.
pub fn gaussian_taps() -> Vec<Real> {
    let half = (WINDOW / 2) as Real;
    let g1: Vec<Real> = (0..WINDOW)
        .map(|i| (-((i as Real - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let total: Real = g1.iter().sum();
    g1.iter().map(|v| v / total).collect()
}

/// Normalized `11 x 11` Gaussian window as a `1 x 1 x 11 x 11` kernel.
pub fn gaussian_window() -> Tensor {
    let g1 = gaussian_taps();
    Tensor::from_fn([1, 1, WINDOW, WINDOW], |_, _, y, x| g1[y] * g1[x])
}

/// How the window treats image borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimBorder {
    /// Only fully-inside windows: output shrinks by `WINDOW - 1` per axis.
    Valid,
    /// Reflect-padded so every pixel gets a value. Interior pixels equal
    /// the `Valid` map exactly.
    Reflect,
}

/// Per-pixel, per-channel SSIM between `a` and `b` for data range 1.
pub fn ssim_map(g: &Graph, a: Var, b: Var, border: SsimBorder) -> Result<Var> {
    let shape = g.shape(a);
    if g.shape(b) != shape {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: shape,
            rhs: g.shape(b),
        });
    }
    let [n, c, h, w] = shape;
    let pad = match border {
        SsimBorder::Valid => {
            if h < WINDOW || w < WINDOW {
                return Err(Error::invalid(
                    "ssim",
                    format!("image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"),
                ));
            }
            0
        }
        SsimBorder::Reflect => WINDOW / 2,
    };
    let planes = [n * c, 1, h, w];
    let a = g.reshape(a, planes)?;
    let b = g.reshape(b, planes)?;
    let taps = gaussian_taps();
    let mode = PaddingMode::Reflect;
    // separable: rows then columns
    let blur = |x: Var| {
        let rows = g.filter1d(x, &taps, FilterAxis::Horizontal, pad, mode)?;
        g.filter1d(rows, &taps, FilterAxis::Vertical, pad, mode)
    };
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let e_aa = blur(g.mul(a, a)?)?;
    let e_bb = blur(g.mul(b, b)?)?;
    let e_ab = blur(g.mul(a, b)?)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;
    let (c1, c2) = (K1 * K1, K2 * K2);
    let num = g.mul(
        g.add_scalar(g.scale(mu_ab, 2.0), c1),
        g.add_scalar(g.scale(cov, 2.0), c2),
    )?;
    let den = g.mul(
        g.add_scalar(g.add(mu_aa, mu_bb)?, c1),
        g.add_scalar(g.add(var_a, var_b)?, c2),
    )?;
    let map = g.div(num, den)?;
    let [_, _, oh, ow] = g.shape(map);
    g.reshape(map, [n, c, oh, ow])
}

/// Mean SSIM over valid windows and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Real> {
    let g = Graph::new();
    let map = ssim_map(&g, g.constant(a.clone()), g.constant(b.clone()), SsimBorder::Valid)?;
    let v = g.value(map).mean();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window SSIM with explicit sums.
    fn oracle(a: &Tensor, b: &Tensor) -> Real {
        let win = gaussian_window();
        let [n, c, h, w] = a.shape();
        let (c1, c2) = (K1 * K1, K2 * K2);
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..n {
            for ch in 0..c {
                for y in 0..=h - WINDOW {
                    for x in 0..=w - WINDOW {
                        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dy in 0..WINDOW {
                            for dx in 0..WINDOW {
                                let k = win.at(0, 0, dy, dx);
                                let va = a.at(bi, ch, y + dy, x + dx);
                                let vb = b.at(bi, ch, y + dy, x + dx);
                                ma += k * va;
                                mb += k * vb;
                                saa += k * va * va;
                                sbb += k * vb * vb;
                                sab += k * va * vb;
                            }
                        }
                        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        count += 1;
                    }
                }
            }
        }
        total / count as Real
    }

    #[test]
    fn window_is_normalized() {
        assert!((gaussian_window().sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::rand_uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &b).unwrap() - oracle(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 1.0);
    }

    #[test]
    fn small_image_rejected() {
        let a = Tensor::zeros([1, 3, 10, 20]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn reflect_interior_equals_valid_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::rand_uniform([1, 2, 14, 17], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([1, 2, 14, 17], 0.0, 1.0, &mut rng);
        let g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let valid = g.value(ssim_map(&g, av, bv, SsimBorder::Valid).unwrap());
        let full = g.value(ssim_map(&g, av, bv, SsimBorder::Reflect).unwrap());
        assert_eq!(full.shape(), [1, 2, 14, 17]);
        let r = WINDOW / 2;
        for c in 0..2 {
            for y in 0..valid.shape()[2] {
                for x in 0..valid.shape()[3] {
                    assert!((valid.at(0, c, y, x) - full.at(0, c, y + r, x + r)).abs() < 1e-12);
                }
            }
        }
    }
}
