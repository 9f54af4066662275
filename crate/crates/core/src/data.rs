//! Stereo training samples: synthetic scenes or patches cut from PNG pairs.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::read_png;
use crate::synthetic::{downsample, SyntheticScene};
use crate::tensor::Tensor;

/// One stereo pair, each image `1 x 3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub lr: [Tensor; 2],
    pub hr: [Tensor; 2],
}

impl Sample {
    pub fn from_hr(hr: [Tensor; 2], scale: usize) -> Result<Self> {
        let lr = [downsample(&hr[0], scale)?, downsample(&hr[1], scale)?];
        Ok(Sample { lr, hr })
    }
}

impl From<&SyntheticScene> for Sample {
    fn from(s: &SyntheticScene) -> Self {
        Sample {
            lr: s.lr.clone(),
            hr: s.hr.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// HR crops of `ph x pw` taken every `stride` pixels.
fn crop_grid(img: &Tensor, ph: usize, pw: usize, stride: usize) -> Vec<(usize, usize)> {
    let [_, _, h, w] = img.shape();
    if h < ph || w < pw {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in (0..=h - ph).step_by(stride) {
        for x in (0..=w - pw).step_by(stride) {
            out.push((y, x));
        }
    }
    out
}

fn crop(img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = img.shape();
    Tensor::from_fn([n, c, h, w], |ni, ci, y, x| img.at(ni, ci, y0 + y, x0 + x))
}

impl Dataset {
    pub fn from_scenes(scenes: &[SyntheticScene]) -> Self {
        Dataset {
            samples: scenes.iter().map(Sample::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stereo pairs from `dir/left/*.png` and `dir/right/*.png` with matching
    /// file names, cut into HR patches.
    pub fn from_folder(dir: &Path, scale: usize, patch_h: usize, patch_w: usize, stride: usize) -> Result<Self> {
        let pairs = list_pairs(dir)?;
        let mut samples = Vec::new();
        for (l, r) in pairs {
            let (left, right) = (read_png(&l)?, read_png(&r)?);
            if left.shape() != right.shape() {
                return Err(Error::invalid(
                    "dataset",
                    format!("{} and {} differ in size", l.display(), r.display()),
                ));
            }
            for (y, x) in crop_grid(&left, patch_h, patch_w, stride) {
                let hr = [crop(&left, y, x, patch_h, patch_w), crop(&right, y, x, patch_h, patch_w)];
                samples.push(Sample::from_hr(hr, scale)?);
            }
        }
        if samples.is_empty() {
            return Err(Error::invalid("dataset", format!("no {patch_h}x{patch_w} patches in {}", dir.display())));
        }
        Ok(Dataset { samples })
    }

    /// Indices of the batch used at `step`: every sample when the set is no
    /// larger than the batch, otherwise a draw seeded by `(seed, step)`.
    pub fn batch_indices(&self, batch: usize, seed: u64, step: usize) -> Vec<usize> {
        if self.len() <= batch {
            return (0..self.len()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx = sample_indices(&mut rng, self.len(), batch).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Matching `left/x.png`, `right/x.png` pairs in name order.
pub fn list_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let left_dir = dir.join("left");
    let mut names: Vec<_> = std::fs::read_dir(&left_dir)
        .map_err(|e| Error::io(&left_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for l in names {
        let r = dir.join("right").join(l.file_name().expect("listed file has a name"));
        if r.exists() {
            out.push((l, r));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_png;
    use crate::synthetic::{scene_set, Texture};

    #[test]
    fn batches_cover_small_sets_and_vary_on_large_ones() {
        let scenes = scene_set(0, 6, 8, 16, 0, 3, 2).unwrap();
        let d = Dataset::from_scenes(&scenes);
        assert_eq!(d.batch_indices(8, 0, 5), (0..6).collect::<Vec<_>>());
        let a = d.batch_indices(3, 1, 0);
        assert_eq!(a, d.batch_indices(3, 1, 0));
        assert_eq!(a.len(), 3);
        assert!((0..20).any(|s| d.batch_indices(3, 1, s) != a));
    }

    #[test]
    fn folder_patches() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("left")).unwrap();
        std::fs::create_dir_all(dir.path().join("right")).unwrap();
        let s = SyntheticScene::generate(3, 16, 40, 4, Texture::Gradients, 2).unwrap();
        write_png(dir.path().join("left/a.png"), &s.hr[0]).unwrap();
        write_png(dir.path().join("right/a.png"), &s.hr[1]).unwrap();
        let d = Dataset::from_folder(dir.path(), 2, 8, 16, 8).unwrap();
        // rows {0, 8}, columns {0, 8, 16, 24}
        assert_eq!(d.len(), 8);
        assert_eq!(d.samples[0].lr[0].shape(), [1, 3, 4, 8]);
        assert!(Dataset::from_folder(dir.path(), 2, 32, 64, 8).is_err());
    }
}
