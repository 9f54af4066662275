//! Feedback from one iteration's HR products to the next iteration's LR
//! features: down-projected HR features with high-frequency attention, and
//! LR features enriched by warping with the sub-pixel slices of the HR
//! disparity.

use rand::Rng;

use crate::attention::View;
use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Builder, Conv2d, ConvTranspose2d, PRelu, ResBlock};
use crate::tensor::{Real, Tensor};

/// HR features back to LR resolution, with high-frequency regions
/// (where the pooled-and-restored map exceeds the original) amplified:
/// `LB + lambda * LB * act(restore(pool(LB)) - LB)`.
#[derive(Clone, Debug)]
pub struct HrFeedback {
    down: Vec<Conv2d>,
    restore: ConvTranspose2d,
    slope: Option<PRelu>,
    lambda: Real,
}

impl HrFeedback {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("hr_feedback");
        let c = cfg.channels;
        let steps = cfg.scale.trailing_zeros() as usize;
        let down = (0..steps)
            .map(|i| Conv2d::with_stride(&mut s, &format!("down{i}"), c, c, 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let restore = ConvTranspose2d::new(&mut s, "restore", c, c, 4, 2, 1)?;
        let slope = if cfg.learnable_feedback_slope {
            let p = PRelu::new(&mut s, "slope", c)?;
            s.store.value_mut(p.alpha).data_mut().fill(0.0);
            Some(p)
        } else {
            None
        };
        Ok(HrFeedback {
            down,
            restore,
            slope,
            lambda: cfg.feedback_lambda,
        })
    }

    /// Plain strided down-projection.
    pub fn project(&self, g: &Graph, hr: Var) -> Result<Var> {
        let mut x = hr;
        for conv in &self.down {
            x = conv.forward(g, x)?;
        }
        Ok(x)
    }

    /// High-frequency attention of a projected map.
    pub fn attention(&self, g: &Graph, lb: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(lb);
        let pooled = g.avg_pool(lb, 2)?;
        let restored = g.crop2d(self.restore.forward(g, pooled)?, 0, 0, h, w)?;
        let diff = g.sub(restored, lb)?;
        match &self.slope {
            Some(p) => p.forward(g, diff),
            None => Ok(g.relu(diff)),
        }
    }

    pub fn forward(&self, g: &Graph, hr: Var) -> Result<Var> {
        let lb = self.project(g, hr)?;
        if self.lambda == 0.0 {
            return Ok(lb);
        }
        let att = self.attention(g, lb)?;
        let boost = g.scale(g.mul(lb, att)?, self.lambda);
        g.add(lb, boost)
    }
}

/// Enriches one view's LR features with the other view's features warped by
/// each of the `s^2` sub-pixel slices of the HR disparity (converted to LR
/// pixels); every slice shares one residual block and 1x1 fusion, and the
/// fused maps are summed.
#[derive(Clone, Debug)]
pub struct LowLevelEnrichment {
    block: ResBlock,
    fusion: Conv2d,
    scale: usize,
}

impl LowLevelEnrichment {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("enrich");
        let c = cfg.channels;
        Ok(LowLevelEnrichment {
            block: ResBlock::new(&mut s, "resblock", 2 * c)?,
            fusion: Conv2d::new(&mut s, "fusion", 2 * c, c, 1)?,
            scale: cfg.scale,
        })
    }

    /// The `s^2` LR disparity slices, in LR pixel units, `N x s^2 x H x W`.
    pub fn disparity_slices(&self, g: &Graph, hr_disp: Var) -> Result<Var> {
        let cube = g.space_to_depth(hr_disp, self.scale)?;
        Ok(g.scale(cube, 1.0 / self.scale as Real))
    }

    /// Fusion of the own features with one warped copy of the other view.
    pub fn fuse_one(&self, g: &Graph, own: Var, warped: Var) -> Result<Var> {
        let cat = g.concat(&[own, warped], 1)?;
        self.fusion.forward(g, self.block.forward(g, cat)?)
    }

    pub fn forward(&self, g: &Graph, own: Var, other: Var, hr_disp: Var, view: View) -> Result<Var> {
        ensure_shape("enrich", g.shape(own), g.shape(other))?;
        let [n, _, h, w] = g.shape(own);
        let [dn, dc, dh, dw] = g.shape(hr_disp);
        if (dn, dc, dh, dw) != (n, 1, h * self.scale, w * self.scale) {
            return Err(Error::ShapeMismatch {
                op: "enrich",
                lhs: [n, 1, h * self.scale, w * self.scale],
                rhs: [dn, dc, dh, dw],
            });
        }
        let slices = self.disparity_slices(g, hr_disp)?;
        let mut total: Option<Var> = None;
        for i in 0..self.scale * self.scale {
            let d = g.slice(slices, 1, i, 1)?;
            let warped = g.warp(other, d, view.sample_direction())?.warped;
            let fused = self.fuse_one(g, own, warped)?;
            total = Some(match total {
                None => fused,
                Some(t) => g.add(t, fused)?,
            });
        }
        Ok(total.expect("scale >= 1"))
    }
}

/// Concatenate enriched features and the HR feedback, 1x1 back to `C`.
#[derive(Clone, Debug)]
pub struct FeedbackFusion {
    conv: Conv2d,
}

impl FeedbackFusion {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("feedback_fuse");
        Ok(FeedbackFusion {
            conv: Conv2d::new(&mut s, "conv", 2 * cfg.channels, cfg.channels, 1)?,
        })
    }

    pub fn forward(&self, g: &Graph, enriched: Var, projected: Var) -> Result<Var> {
        ensure_shape("feedback_fuse", g.shape(enriched), g.shape(projected))?;
        let cat = g.concat(&[enriched, projected], 1)?;
        self.conv.forward(g, cat)
    }
}

/// Zero-disparity slices for tests and diagnostics.
pub fn zero_disparity(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::zeros([n, 1, h, w])
}
