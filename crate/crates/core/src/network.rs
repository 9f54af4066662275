//! The recurrent stereo SR network, unrolled for `T` iterations with two SR
//! reconstructions per iteration and optional HR-disparity feedback between
//! iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_warp, disparity_from_coordinate, expected_coordinate, fill_unmatched, lr_valid_mask,
    ParallaxAttention, View,
};
use crate::autodiff::{Graph, Var};
use crate::backbone::{compose_sr, FeatureExtractor, Reconstructor, ResidualFusion, Transition, Upsampler};
use crate::config::ModelConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::feedback::{FeedbackFusion, HrFeedback, LowLevelEnrichment};
use crate::hr_disparity::{valid_masks, HrAggregation, HrDisparity};
use crate::nn::{Builder, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Per-view products of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct ViewStep {
    /// Features entering the iteration (extracted at `t = 1`, fed back later).
    pub features: Var,
    /// First SR reconstruction, from the fused LR features.
    pub sr0: Var,
    /// Second SR reconstruction, from the disparity-aggregated HR features.
    pub sr1: Var,
    /// Attention map rows indexed by this view's pixels, `N x H x W x W`.
    pub map: Var,
    /// Attention-weighted matched column, `N x 1 x H x W`.
    pub coord: Var,
    /// LR disparity regressed from the attention map.
    pub lr_disp: Var,
    /// LR disparity upsampled to HR and scaled by `s`.
    pub upsampled_disp: Var,
    pub hr_disp: Var,
    /// Cross-check confidence of the HR disparity.
    pub valid: Var,
    /// HR features before and after cross-view aggregation.
    pub hr_features: Var,
    pub hr_aggregated: Var,
}

/// Products of one iteration for both views, indexed by [`View::index`].
#[derive(Clone, Debug)]
pub struct IterationStep {
    pub views: [ViewStep; 2],
    /// Binary LR match masks from the attention peaks.
    pub lr_valid: [Tensor; 2],
    /// 1 where the HR disparity lands inside the other image.
    pub hr_in_view: [Tensor; 2],
}

/// All iterations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub iterations: Vec<IterationStep>,
    /// Bicubic upsampled LR inputs.
    pub upsampled: [Var; 2],
}

impl Trace {
    pub fn last(&self) -> &IterationStep {
        self.iterations.last().expect("trace has at least one iteration")
    }

    /// The final outputs, second reconstruction of the last iteration.
    pub fn output(&self) -> [Var; 2] {
        let last = self.last();
        [last.views[0].sr1, last.views[1].sr1]
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    extract: FeatureExtractor,
    transition: Transition,
    attention: ParallaxAttention,
    ffm: ResidualFusion,
    reconstruct: Reconstructor,
    rec: Conv2d,
    hr_disparity: HrDisparity,
    aggregate: HrAggregation,
    hr_feedback: HrFeedback,
    enrich: LowLevelEnrichment,
    feedback_fuse: FeedbackFusion,
}

impl Network {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Network {
            cfg: cfg.clone(),
            extract: FeatureExtractor::new(b, cfg)?,
            transition: Transition::new(b, cfg)?,
            attention: ParallaxAttention::new(b, cfg)?,
            ffm: ResidualFusion::new(b, "ffm", cfg)?,
            reconstruct: Reconstructor::new(b, cfg)?,
            rec: Conv2d::new(b, "rec", cfg.channels, 3, 3)?,
            hr_disparity: HrDisparity::new(b, cfg)?,
            aggregate: HrAggregation::new(b, cfg)?,
            hr_feedback: HrFeedback::new(b, cfg)?,
            enrich: LowLevelEnrichment::new(b, cfg)?,
            feedback_fuse: FeedbackFusion::new(b, cfg)?,
        })
    }

    /// Builds the network with freshly initialised parameters from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut Builder::new(&mut store, &mut rng), cfg)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_inputs(&self, g: &Graph, lr: [Var; 2]) -> Result<()> {
        ensure_shape("network", g.shape(lr[0]), g.shape(lr[1]))?;
        let [_, c, h, w] = g.shape(lr[0]);
        if c != 3 {
            return Err(Error::invalid("network", format!("expected 3-channel images, got {c}")));
        }
        self.cfg.check_input(h, w)
    }

    /// Runs all configured iterations.
    pub fn forward(&self, g: &Graph, lr: [Var; 2]) -> Result<Trace> {
        self.run(g, lr, self.cfg.iterations)
    }

    /// The pure feed-forward network: feature extraction and one iteration.
    pub fn forward_baseline(&self, g: &Graph, lr: [Var; 2]) -> Result<Trace> {
        self.run(g, lr, 1)
    }

    fn run(&self, g: &Graph, lr: [Var; 2], iterations: usize) -> Result<Trace> {
        self.check_inputs(g, lr)?;
        let [_, _, h, w] = g.shape(lr[0]);
        let up = Upsampler::bicubic(h, w, self.cfg.scale);
        let upsampled = [up.forward(g, lr[0])?, up.forward(g, lr[1])?];
        let extracted = [self.extract.forward(g, lr[0])?, self.extract.forward(g, lr[1])?];
        let mut features = extracted;
        let mut iterations_out = Vec::with_capacity(iterations);
        for t in 0..iterations {
            let step = self.iteration(g, features, upsampled)?;
            if t + 1 < iterations {
                features = if self.cfg.feedback {
                    self.feed_back(g, &step)?
                } else {
                    extracted
                };
            }
            iterations_out.push(step);
        }
        Ok(Trace {
            iterations: iterations_out,
            upsampled,
        })
    }

    fn iteration(&self, g: &Graph, features: [Var; 2], upsampled: [Var; 2]) -> Result<IterationStep> {
        let star = [self.transition.forward(g, features[0])?, self.transition.forward(g, features[1])?];
        let att = self.attention.forward(g, star[0], star[1])?;
        let lr_valid = [
            lr_valid_mask(&g.value(att.maps[0]), self.cfg.valid_threshold),
            lr_valid_mask(&g.value(att.maps[1]), self.cfg.valid_threshold),
        ];

        let mut hr_features = Vec::with_capacity(2);
        let mut sr0 = Vec::with_capacity(2);
        let mut coords = Vec::with_capacity(2);
        let mut lr_disp = Vec::with_capacity(2);
        for view in View::BOTH {
            let v = view.index();
            let o = view.other().index();
            let warped = attention_warp(g, att.maps[v], att.features[o])?;
            let warped = fill_unmatched(g, warped, att.features[v], &lr_valid[v])?;
            let fused = self.ffm.forward(g, att.features[v], warped)?;
            let h = self.reconstruct.forward(g, fused)?;
            sr0.push(compose_sr(g, &self.rec, upsampled[v], h)?);
            hr_features.push(h);
            let coord = expected_coordinate(g, att.maps[v])?;
            lr_disp.push(disparity_from_coordinate(g, coord, view)?);
            coords.push(coord);
        }

        let mut hr = Vec::with_capacity(2);
        for view in View::BOTH {
            let v = view.index();
            let o = view.other().index();
            hr.push(self.hr_disparity.forward(g, hr_features[v], hr_features[o], lr_disp[v], view)?);
        }
        let hr_disp = [hr[0].disparity, hr[1].disparity];
        let valid = valid_masks(g, hr_disp)?;

        let mut views = Vec::with_capacity(2);
        let mut in_view = Vec::with_capacity(2);
        for view in View::BOTH {
            let v = view.index();
            let o = view.other().index();
            let warped = g.warp(hr_features[o], hr_disp[v], view.sample_direction())?;
            let aggregated = self.aggregate.forward(g, hr_features[v], warped.warped)?;
            in_view.push(warped.in_view);
            views.push(ViewStep {
                features: features[v],
                sr0: sr0[v],
                sr1: compose_sr(g, &self.rec, upsampled[v], aggregated)?,
                map: att.maps[v],
                coord: coords[v],
                lr_disp: lr_disp[v],
                upsampled_disp: hr[v].init,
                hr_disp: hr_disp[v],
                valid: valid[v],
                hr_features: hr_features[v],
                hr_aggregated: aggregated,
            });
        }
        let [in_l, in_r]: [Tensor; 2] = in_view.try_into().expect("two views");
        Ok(IterationStep {
            views: [views[0], views[1]],
            lr_valid,
            hr_in_view: [in_l, in_r],
        })
    }

    /// Features for the next iteration from the aggregated HR features and
    /// the HR disparities of this one.
    fn feed_back(&self, g: &Graph, step: &IterationStep) -> Result<[Var; 2]> {
        let mut next = Vec::with_capacity(2);
        for view in View::BOTH {
            let own = &step.views[view.index()];
            let other = &step.views[view.other().index()];
            let projected = self.hr_feedback.forward(g, own.hr_aggregated)?;
            let enriched = self.enrich.forward(g, own.features, other.features, own.hr_disp, view)?;
            next.push(self.feedback_fuse.forward(g, enriched, projected)?);
        }
        Ok([next[0], next[1]])
    }
}
