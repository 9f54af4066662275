//! Synthetic rectified stereo scenes with exactly known disparity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{apply_separable, Resample};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    /// Uniform noise smoothed by a 5-tap binomial filter.
    FilteredNoise,
    /// A few random sinusoidal gradients per channel.
    Gradients,
}

/// An HR stereo pair in which the right view is the left one shifted by a
/// constant `d` HR pixels, and its bicubic LR counterpart.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub hr: [Tensor; 2],
    pub lr: [Tensor; 2],
    /// Ground-truth disparity of each view in HR pixels, `1 x 1 x H x W`.
    pub disparity: [Tensor; 2],
    /// 1 where the pixel is visible in the other view.
    pub non_occluded: [Tensor; 2],
    pub shift: usize,
    pub scale: usize,
}

fn binomial_blur_row(src: &[Real]) -> Vec<Real> {
    const TAPS: [Real; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let n = src.len();
    (0..n)
        .map(|i| {
            TAPS.iter()
                .enumerate()
                .map(|(k, t)| t * src[crate::linalg::reflect_index(i as isize + k as isize - 2, n)])
                .sum()
        })
        .collect()
}

/// A `1 x 3 x h x w` texture with values in `[0, 1]`.
pub fn texture(rng: &mut impl Rng, h: usize, w: usize, kind: Texture) -> Tensor {
    match kind {
        Texture::FilteredNoise => {
            let mut t = Tensor::rand_uniform([1, 3, h, w], 0.0, 1.0, rng);
            for c in 0..3 {
                let plane = &mut t.data_mut()[c * h * w..(c + 1) * h * w];
                for row in plane.chunks_mut(w) {
                    let b = binomial_blur_row(row);
                    row.copy_from_slice(&b);
                }
                let mut col = vec![0.0; h];
                for x in 0..w {
                    for y in 0..h {
                        col[y] = plane[y * w + x];
                    }
                    for (y, v) in binomial_blur_row(&col).into_iter().enumerate() {
                        plane[y * w + x] = v;
                    }
                }
            }
            t
        }
        Texture::Gradients => {
            let waves: Vec<[Real; 4]> = (0..9)
                .map(|_| {
                    [
                        rng.random_range(0.05..0.6),
                        rng.random_range(0.05..0.6),
                        rng.random_range(0.0..std::f64::consts::TAU) as Real,
                        rng.random_range(0.1..0.3),
                    ]
                })
                .collect();
            Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
                let v: Real = waves[c * 3..c * 3 + 3]
                    .iter()
                    .map(|[fx, fy, ph, amp]| amp * (fx * x as Real + fy * y as Real + ph).sin())
                    .sum();
                (0.5 + v).clamp(0.0, 1.0)
            })
        }
    }
}

/// Bicubic (antialiased) downsampling by `scale`.
pub fn downsample(hr: &Tensor, scale: usize) -> Result<Tensor> {
    let [_, _, h, w] = hr.shape();
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid("downsample", format!("{h}x{w} not divisible by {scale}")));
    }
    Ok(apply_separable(hr, &Resample::bicubic_down(h, scale), &Resample::bicubic_down(w, scale)))
}

impl SyntheticScene {
    /// HR size `h x w`, disparity `d` with `0 <= d < w / 4`.
    pub fn generate(seed: u64, h: usize, w: usize, d: usize, kind: Texture, scale: usize) -> Result<Self> {
        if 4 * d >= w {
            return Err(Error::invalid("generate_synthetic", format!("disparity {d} not below width/4 = {}", w / 4)));
        }
        if scale == 0 {
            return Err(Error::invalid("generate_synthetic", "scale must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // left(x) = wide(x), right(x) = wide(x + d): left x matches right x - d
        let wide = texture(&mut rng, h, w + d, kind);
        let left = Tensor::from_fn([1, 3, h, w], |_, c, y, x| wide.at(0, c, y, x));
        let right = Tensor::from_fn([1, 3, h, w], |_, c, y, x| wide.at(0, c, y, x + d));
        let disp = Tensor::full([1, 1, h, w], d as Real);
        let noc_left = Tensor::from_fn([1, 1, h, w], |_, _, _, x| if x >= d { 1.0 } else { 0.0 });
        let noc_right = Tensor::from_fn([1, 1, h, w], |_, _, _, x| if x + d < w { 1.0 } else { 0.0 });
        let lr = [downsample(&left, scale)?, downsample(&right, scale)?];
        Ok(SyntheticScene {
            hr: [left, right],
            lr,
            disparity: [disp.clone(), disp],
            non_occluded: [noc_left, noc_right],
            shift: d,
            scale,
        })
    }
}

/// `count` scenes with disparities cycling through `[d_min, d_max]` and
/// alternating textures; scene `i` uses seed `seed + i`.
pub fn scene_set(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    d_min: usize,
    d_max: usize,
    scale: usize,
) -> Result<Vec<SyntheticScene>> {
    let span = d_max.saturating_sub(d_min) + 1;
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 { Texture::FilteredNoise } else { Texture::Gradients };
            SyntheticScene::generate(seed + i as u64, h, w, d_min + i % span, kind, scale)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, SampleDirection};

    #[test]
    fn zero_shift_gives_identical_views() {
        let s = SyntheticScene::generate(0, 8, 16, 0, Texture::FilteredNoise, 2).unwrap();
        assert_eq!(s.hr[0], s.hr[1]);
        assert!(s.non_occluded[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shift_scales_to_lr() {
        let s = SyntheticScene::generate(1, 8, 32, 4, Texture::Gradients, 2).unwrap();
        assert_eq!(s.lr[0].shape(), [1, 3, 4, 16]);
        assert!(s.disparity[0].data().iter().all(|&v| v == 4.0));
        assert_eq!(s.shift / s.scale, 2);
        assert!(SyntheticScene::generate(1, 8, 32, 8, Texture::Gradients, 2).is_err());
    }

    #[test]
    fn right_view_warped_by_ground_truth_is_left() {
        for kind in [Texture::FilteredNoise, Texture::Gradients] {
            let s = SyntheticScene::generate(2, 8, 40, 7, kind, 2).unwrap();
            let g = Graph::new();
            let out = g
                .warp(g.constant(s.hr[1].clone()), g.constant(s.disparity[0].clone()), SampleDirection::Minus)
                .unwrap();
            let warped = g.value(out.warped);
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..40 {
                        if s.non_occluded[0].at(0, 0, y, x) == 1.0 {
                            assert!((warped.at(0, c, y, x) - s.hr[0].at(0, c, y, x)).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn textures_in_unit_range_and_deterministic() {
        let a = SyntheticScene::generate(5, 8, 16, 2, Texture::FilteredNoise, 2).unwrap();
        let b = SyntheticScene::generate(5, 8, 16, 2, Texture::FilteredNoise, 2).unwrap();
        assert_eq!(a.hr[0], b.hr[0]);
        for kind in [Texture::FilteredNoise, Texture::Gradients] {
            let t = texture(&mut ChaCha8Rng::seed_from_u64(3), 6, 6, kind);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
