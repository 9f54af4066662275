//! Model, loss and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Super-resolution factor, 2 or 4.
    pub scale: usize,
    pub channels: usize,
    /// RDBs in the feature extractor (and in the reconstructor).
    pub rdb_blocks: usize,
    pub rdb_layers: usize,
    pub rdb_growth: usize,
    /// Pooled grid sizes of the transition block's pyramid.
    pub spp_levels: Vec<usize>,
    /// Number of cascaded parallax-attention stages.
    pub cascade: usize,
    /// A pixel's attention row counts as matched when its peak is at least
    /// `valid_threshold / W`, i.e. this many times the uniform level.
    pub valid_threshold: Real,
    /// Disparity hypotheses per HR pixel.
    pub hypotheses: usize,
    /// Width of the HR search window around the upsampled LR disparity.
    pub search_range: Real,
    /// Weight of the high-frequency attention term in the feedback path.
    pub feedback_lambda: Real,
    /// Learnable slope for the feedback attention; the default fixed slope
    /// of zero keeps the attention non-negative.
    pub learnable_feedback_slope: bool,
    pub iterations: usize,
    pub feedback: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 2,
            channels: 16,
            rdb_blocks: 4,
            rdb_layers: 4,
            rdb_growth: 16,
            spp_levels: vec![1, 2, 4],
            cascade: 2,
            valid_threshold: 2.0,
            hypotheses: 24,
            search_range: 24.0,
            feedback_lambda: 1.0,
            learnable_feedback_slope: false,
            iterations: 2,
            feedback: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.scale != 2 && self.scale != 4 {
            return fail("scale must be 2 or 4");
        }
        if self.channels == 0 || self.rdb_blocks == 0 || self.rdb_layers == 0 || self.rdb_growth == 0 {
            return fail("channel counts and block depths must be positive");
        }
        if self.spp_levels.contains(&0) {
            return fail("pyramid levels must be positive");
        }
        if self.cascade == 0 {
            return fail("attention cascade needs at least one stage");
        }
        if self.hypotheses < 2 {
            return fail("at least two disparity hypotheses are required");
        }
        if !(self.search_range > 0.0) {
            return fail("search range must be positive");
        }
        if !(self.valid_threshold >= 0.0) || !(self.feedback_lambda >= 0.0) {
            return fail("thresholds and weights must be non-negative");
        }
        if self.iterations == 0 {
            return fail("at least one iteration is required");
        }
        Ok(())
    }

    /// Checks an LR input size against the network's pooling and
    /// down-projection requirements.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let max_level = self.spp_levels.iter().copied().max().unwrap_or(1);
        if h < max_level || w < max_level {
            return Err(Error::Config(format!(
                "input {h}x{w} smaller than pyramid level {max_level}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("input {h}x{w} too small")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the attention loss.
    pub lambda1: Real,
    /// Weight of the disparity loss.
    pub lambda2: Real,
    /// SSIM share of the photometric reconstruction term.
    pub alpha: Real,
    pub smooth_weight: Real,
    /// Compare high-pass residuals (image minus 3x3 box blur) instead of raw
    /// images in the attention photometric and consistency terms.
    pub residual: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            alpha: 0.85,
            smooth_weight: 0.1,
            residual: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.alpha, self.smooth_weight]
            .iter()
            .all(|&v| v >= 0.0)
            && self.alpha <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be non-negative and alpha <= 1".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Halve the learning rate after every this many epochs; `None` keeps
    /// it constant.
    pub halve_every_epochs: Option<usize>,
    pub batch_size: usize,
    pub steps: usize,
    /// HR patch size.
    pub patch_h: usize,
    pub patch_w: usize,
    /// Crop stride when cutting patches from larger images.
    pub patch_stride: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Stop once the mean final-output PSNR on the batch reaches this.
    pub target_psnr: Option<Real>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every_epochs: Some(30),
            batch_size: 4,
            steps: 2000,
            patch_h: 16,
            patch_w: 48,
            patch_stride: 20,
            seed: 0,
            checkpoint_every: 0,
            target_psnr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyper-parameters".into()));
        }
        if self.batch_size == 0 || self.patch_stride == 0 {
            return Err(Error::Config("batch size and stride must be positive".into()));
        }
        if self.patch_h % scale != 0 || self.patch_w % scale != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by scale {scale}",
                self.patch_h, self.patch_w
            )));
        }
        Ok(())
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> Real {
        match self.halve_every_epochs {
            Some(k) if k > 0 => {
                let halvings = (epoch.max(1) - 1) / k;
                self.lr * (0.5 as Real).powi(halvings as i32)
            }
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Small CPU-friendly configuration: 16 channels, two iterations, x2,
    /// batch 4 of 16x48 HR patches.
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Larger patches and batch, closer to a full-scale training setup.
    pub fn paper_profile() -> Self {
        let mut c = RunConfig::default();
        c.train.batch_size = 16;
        c.train.patch_h = 30 * c.model.scale;
        c.train.patch_w = 90 * c.model.scale;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(self.model.scale)
    }
}
