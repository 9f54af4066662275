//! Cascaded bi-directional parallax attention.
//!
//! Costs and attention maps are `N x H x W x W`. Row `x` of a map belongs to
//! pixel `x` of the view it serves and distributes over columns of the
//! other view in the same image row. `maps[0]` serves the left view (it
//! pulls right-view content to the left), `maps[1]` serves the right view.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure_shape, Result};
use crate::nn::{Builder, Conv2d, PRelu};
use crate::tensor::{Real, Tensor};

/// Which image of the stereo pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub const BOTH: [View; 2] = [View::Left, View::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }

    /// Direction in which this view's disparity displaces sampling of the
    /// other view.
    pub fn sample_direction(self) -> crate::autodiff::SampleDirection {
        match self {
            View::Left => crate::autodiff::SampleDirection::Minus,
            View::Right => crate::autodiff::SampleDirection::Plus,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Left => "left",
            View::Right => "right",
        }
    }
}

/// One cascade stage: a two-conv feature update plus query/key projections.
#[derive(Clone, Debug)]
pub struct AttentionStage {
    conv1: Conv2d,
    act: PRelu,
    conv2: Conv2d,
    query: Conv2d,
    key: Conv2d,
}

impl AttentionStage {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, c: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(AttentionStage {
            conv1: Conv2d::new(&mut s, "conv1", c, c, 3)?,
            act: PRelu::new(&mut s, "prelu", c)?,
            conv2: Conv2d::new(&mut s, "conv2", c, c, 3)?,
            query: Conv2d::new(&mut s, "query", c, c, 1)?,
            key: Conv2d::new(&mut s, "key", c, c, 1)?,
        })
    }

    fn update(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = self.act.forward(g, self.conv1.forward(g, x)?)?;
        self.conv2.forward(g, h)
    }

    /// Stage cost and feature increments for both views:
    /// `cost[v] = Q(L'_v) * K(L'_other)^T` per image row.
    pub fn forward(&self, g: &Graph, feats: [Var; 2]) -> Result<([Var; 2], [Var; 2])> {
        let upd = [self.update(g, feats[0])?, self.update(g, feats[1])?];
        let q = [self.query.forward(g, upd[0])?, self.query.forward(g, upd[1])?];
        let k = [self.key.forward(g, upd[0])?, self.key.forward(g, upd[1])?];
        let row_product = |a: Var, b: Var| -> Result<Var> {
            let qa = g.permute(a, [0, 2, 3, 1])?; // n, h, w, c
            let kb = g.permute(b, [0, 2, 1, 3])?; // n, h, c, w
            g.bmm(qa, kb)
        };
        Ok(([row_product(q[0], k[1])?, row_product(q[1], k[0])?], upd))
    }
}

/// Output of the attention cascade.
pub struct AttentionState {
    pub costs: [Var; 2],
    pub maps: [Var; 2],
    /// Transition features after the residual cascade updates.
    pub features: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct ParallaxAttention {
    stages: Vec<AttentionStage>,
}

impl ParallaxAttention {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("attention");
        let stages = (0..cfg.cascade)
            .map(|i| AttentionStage::new(&mut s, &format!("stage{i}"), cfg.channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallaxAttention { stages })
    }

    pub fn stages(&self) -> &[AttentionStage] {
        &self.stages
    }

    /// Runs the cascade with costs starting at zero.
    pub fn forward(&self, g: &Graph, left: Var, right: Var) -> Result<AttentionState> {
        ensure_shape("parallax_attention", g.shape(left), g.shape(right))?;
        let mut feats = [left, right];
        let mut costs: Option<[Var; 2]> = None;
        for stage in &self.stages {
            let (inc, upd) = stage.forward(g, feats)?;
            costs = Some(match costs {
                None => inc,
                Some(c) => [g.add(c[0], inc[0])?, g.add(c[1], inc[1])?],
            });
            feats = [g.add(feats[0], upd[0])?, g.add(feats[1], upd[1])?];
        }
        let costs = costs.expect("at least one stage");
        let maps = [g.softmax(costs[0], 3)?, g.softmax(costs[1], 3)?];
        Ok(AttentionState {
            costs,
            maps,
            features: feats,
        })
    }
}

/// `out(c, y, x) = sum_k M(y, x, k) * feature(c, y, k)`.
pub fn attention_warp(g: &Graph, map: Var, feature: Var) -> Result<Var> {
    let f = g.permute(feature, [0, 2, 3, 1])?; // n, h, w, c
    let out = g.bmm(map, f)?;
    g.permute(out, [0, 3, 1, 2])
}

/// 1 where the attention row peaks at `threshold / W` or higher.
pub fn lr_valid_mask(map: &Tensor, threshold: Real) -> Tensor {
    let [n, h, w, k] = map.shape();
    let level = threshold / k as Real;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for (i, row) in map.data().chunks(k).enumerate() {
        let peak = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        out.data_mut()[i] = if peak >= level { 1.0 } else { 0.0 };
    }
    out
}

/// `mask * warped + (1 - mask) * own`, the own-view feature filling
/// unmatched pixels.
pub fn fill_unmatched(g: &Graph, warped: Var, own: Var, mask: &Tensor) -> Result<Var> {
    let m = g.constant(mask.clone());
    let inv = g.constant(mask.map(|v| 1.0 - v));
    g.add(g.mul(warped, m)?, g.mul(own, inv)?)
}

/// Attention-weighted column coordinate `sum_k k * M(y, x, k)`, `N x 1 x H x W`.
pub fn expected_coordinate(g: &Graph, map: Var) -> Result<Var> {
    let [n, h, w, k] = g.shape(map);
    let cols = g.constant(Tensor::from_fn([1, 1, 1, k], |_, _, _, x| x as Real));
    let weighted = g.mul(map, cols)?;
    let summed = g.sum_axis(weighted, 3)?; // n, h, w, 1
    g.reshape(summed, [n, 1, h, w])
}

/// Converts a matched coordinate into a non-negative displacement:
/// `x - coord` for the left view, `coord - x` for the right, clamped to
/// `[0, W - 1]`.
pub fn disparity_from_coordinate(g: &Graph, coord: Var, view: View) -> Result<Var> {
    let [_, _, _, w] = g.shape(coord);
    let xs = g.constant(Tensor::from_fn([1, 1, 1, w], |_, _, _, x| x as Real));
    let d = match view {
        View::Left => g.sub(xs, coord)?,
        View::Right => g.sub(coord, xs)?,
    };
    Ok(g.clamp(d, 0.0, (w - 1) as Real))
}
