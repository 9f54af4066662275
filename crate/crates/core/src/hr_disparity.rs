//! Coarse-to-fine HR disparity: a partial cost volume around the upsampled
//! LR estimate, hourglass aggregation, soft-argmax, cross-check masks and
//! attention-gated HR feature aggregation.

use rand::Rng;

use crate::attention::View;
use crate::autodiff::{Graph, Var};
use crate::backbone::{ResidualFusion, Upsampler};
use crate::config::ModelConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Builder, Conv2d, ConvTranspose2d};
use crate::tensor::{Real, Tensor};

/// Bilinear upsampling by `s` with values multiplied by `s`, turning LR
/// displacements into HR ones.
pub fn upsample_disparity(g: &Graph, disp: Var, s: usize) -> Result<Var> {
    let [_, _, h, w] = g.shape(disp);
    let up = Upsampler::bilinear(h, w, s).forward(g, disp)?;
    Ok(g.scale(up, s as Real))
}

/// `P` hypotheses per pixel, `init - range/2 + j * range/P`, clamped to
/// `[0, width - 1]`. Output is `N x P x H x W`.
pub fn hypotheses(g: &Graph, init: Var, count: usize, range: Real) -> Result<Var> {
    if count < 2 {
        return Err(Error::invalid("hypotheses", format!("need at least 2 hypotheses, got {count}")));
    }
    let [_, _, _, w] = g.shape(init);
    let step = range / count as Real;
    let offsets = g.constant(Tensor::from_fn([1, count, 1, 1], |_, j, _, _| -range / 2.0 + j as Real * step));
    let grid = g.add(init, offsets)?;
    Ok(g.clamp(grid, 0.0, (w - 1) as Real))
}

/// Correlation of `own` with `other` sampled at each hypothesis.
pub fn partial_cost_volume(g: &Graph, own: Var, other: Var, hyp: Var, view: View) -> Result<Var> {
    g.correlation(own, other, hyp, view.sample_direction())
}

/// `sum_j softmax_j(cost) * hyp_j`, `N x 1 x H x W`.
pub fn soft_argmax(g: &Graph, cost: Var, hyp: Var) -> Result<Var> {
    let p = g.softmax(cost, 1)?;
    g.sum_axis(g.mul(p, hyp)?, 1)
}

/// Two stride-2 convs down, two transposed convs up, with additive skips.
/// Inputs are zero-padded to a multiple of 4 and cropped back.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down1: Conv2d,
    down2: Conv2d,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl Hourglass {
    pub fn new<R: Rng>(b: &mut Builder<R>, channels: usize) -> Result<Self> {
        let mut s = b.scope("hourglass");
        let c = channels;
        Ok(Hourglass {
            down1: Conv2d::with_stride(&mut s, "down1", c, c, 3, 2, 1)?,
            down2: Conv2d::with_stride(&mut s, "down2", c, c, 3, 2, 1)?,
            up1: ConvTranspose2d::new(&mut s, "up1", c, c, 4, 2, 1)?,
            up2: ConvTranspose2d::new(&mut s, "up2", c, c, 4, 2, 1)?,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let x0 = g.pad2d(x, h.next_multiple_of(4) - h, w.next_multiple_of(4) - w);
        let d1 = g.relu(self.down1.forward(g, x0)?);
        let d2 = g.relu(self.down2.forward(g, d1)?);
        let u1 = g.relu(g.add(self.up1.forward(g, d2)?, d1)?);
        let u2 = g.add(self.up2.forward(g, u1)?, x0)?;
        g.crop2d(u2, 0, 0, h, w)
    }
}

/// Products of the HR disparity estimation for one view.
pub struct HrDisparityOutput {
    pub init: Var,
    pub hypotheses: Var,
    pub cost: Var,
    pub disparity: Var,
}

#[derive(Clone, Debug)]
pub struct HrDisparity {
    hourglass: Hourglass,
    scale: usize,
    count: usize,
    range: Real,
}

impl HrDisparity {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("hr_disparity");
        Ok(HrDisparity {
            hourglass: Hourglass::new(&mut s, cfg.hypotheses)?,
            scale: cfg.scale,
            count: cfg.hypotheses,
            range: cfg.search_range,
        })
    }

    pub fn forward(&self, g: &Graph, own: Var, other: Var, lr_disp: Var, view: View) -> Result<HrDisparityOutput> {
        ensure_shape("hr_disparity", g.shape(own), g.shape(other))?;
        let init = upsample_disparity(g, lr_disp, self.scale)?;
        let [_, _, h, w] = g.shape(own);
        let [_, _, ih, iw] = g.shape(init);
        if (ih, iw) != (h, w) {
            return Err(Error::invalid(
                "hr_disparity",
                format!("upsampled disparity {ih}x{iw} does not match features {h}x{w}"),
            ));
        }
        let hyp = hypotheses(g, init, self.count, self.range)?;
        let raw = partial_cost_volume(g, own, other, hyp, view)?;
        let cost = self.hourglass.forward(g, raw)?;
        let disparity = soft_argmax(g, cost, hyp)?;
        Ok(HrDisparityOutput {
            init,
            hypotheses: hyp,
            cost,
            disparity,
        })
    }
}

/// `1 - tanh(0.2 |D_v - Warp(D_other, D_v)|)` for both views.
pub fn valid_masks(g: &Graph, disp: [Var; 2]) -> Result<[Var; 2]> {
    let mut out = Vec::with_capacity(2);
    for view in View::BOTH {
        let own = disp[view.index()];
        let other = disp[view.other().index()];
        let cross = g.warp(other, own, view.sample_direction())?.warped;
        let diff = g.abs(g.sub(own, cross)?);
        let t = g.tanh(g.scale(diff, 0.2));
        out.push(g.add_scalar(g.neg(t), 1.0));
    }
    Ok([out[0], out[1]])
}

/// Similarity-gated residual fusion of HR features:
/// `Att = sigmoid(5 * conv1(own) * conv2(warped))`,
/// `out = CALayer(RDB((warped - own) * Att) + own)`.
#[derive(Clone, Debug)]
pub struct HrAggregation {
    conv1: Conv2d,
    conv2: Conv2d,
    fusion: ResidualFusion,
}

impl HrAggregation {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("hr_aggregate");
        let c = cfg.channels;
        Ok(HrAggregation {
            conv1: Conv2d::new(&mut s, "conv1", c, c, 3)?,
            conv2: Conv2d::new(&mut s, "conv2", c, c, 3)?,
            fusion: ResidualFusion::new(&mut s, "fusion", cfg)?,
        })
    }

    pub fn gate(&self, g: &Graph, own: Var, warped: Var) -> Result<Var> {
        let prod = g.mul(self.conv1.forward(g, own)?, self.conv2.forward(g, warped)?)?;
        Ok(g.sigmoid(g.scale(prod, 5.0)))
    }

    pub fn forward(&self, g: &Graph, own: Var, warped: Var) -> Result<Var> {
        ensure_shape("hr_aggregate", g.shape(own), g.shape(warped))?;
        let att = self.gate(g, own, warped)?;
        let residual = g.mul(g.sub(warped, own)?, att)?;
        self.fusion.fuse_residual(g, residual, own)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsampled_constant_disparity_scales() {
        let g = Graph::new();
        let d = g.constant(Tensor::full([1, 1, 3, 4], 3.0));
        let up = g.value(upsample_disparity(&g, d, 2).unwrap());
        assert_eq!(up.shape(), [1, 1, 6, 8]);
        assert!(up.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_cost_gives_grid_mean() {
        let g = Graph::new();
        let init = g.constant(Tensor::full([1, 1, 2, 64], 30.0));
        let hyp = hypotheses(&g, init, 24, 24.0).unwrap();
        let hv = g.value(hyp);
        assert_eq!(hv.at(0, 0, 0, 0), 18.0);
        assert_eq!(hv.at(0, 23, 0, 0), 41.0);
        let d = soft_argmax(&g, g.constant(Tensor::zeros([1, 24, 2, 64])), hyp).unwrap();
        assert!(g.value(d).data().iter().all(|&v| (v - 29.5).abs() < 1e-12));
    }

    #[test]
    fn dominant_hypothesis_wins() {
        let g = Graph::new();
        let init = g.constant(Tensor::full([1, 1, 1, 64], 30.0));
        let hyp = hypotheses(&g, init, 24, 24.0).unwrap();
        let cost = Tensor::from_fn([1, 24, 1, 64], |_, j, _, _| if j == 7 { 50.0 } else { 0.0 });
        let d = g.value(soft_argmax(&g, g.constant(cost), hyp).unwrap());
        assert!(d.data().iter().all(|&v| (v - 25.0).abs() < 1e-9));
    }

    #[test]
    fn hypotheses_clamped_to_image() {
        let g = Graph::new();
        let init = g.constant(Tensor::full([1, 1, 1, 10], 2.0));
        let hv = g.value(hypotheses(&g, init, 24, 24.0).unwrap());
        assert!(hv.data().iter().all(|&v| (0.0..=9.0).contains(&v)));
        assert!(hypotheses(&g, init, 1, 24.0).is_err());
    }

    #[test]
    fn masks_for_consistent_and_mismatched_disparities() {
        let g = Graph::new();
        let d = g.constant(Tensor::full([1, 1, 4, 16], 3.0));
        let [vl, vr] = valid_masks(&g, [d, d]).unwrap();
        // the cross-check is only defined where the match lands inside the image
        let (vl, vr) = (g.value(vl), g.value(vr));
        for x in 0..16 {
            assert_eq!(vl.at(0, 0, 1, x) == 1.0, x >= 3, "left x={x}");
            assert_eq!(vr.at(0, 0, 1, x) == 1.0, x <= 12, "right x={x}");
        }
        let far = g.constant(Tensor::full([1, 1, 4, 16], 8.0));
        let [vl, _] = valid_masks(&g, [d, far]).unwrap();
        let expected = 1.0 - (1.0 as Real).tanh();
        assert!((g.value(vl).at(0, 0, 0, 10) - expected).abs() < 1e-12);
    }

    #[test]
    fn hourglass_zero_weights_pass_input_through() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hg = Hourglass::new(&mut Builder::new(&mut store, &mut rng), 3).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::with_params(&store);
        let x = Tensor::randn([1, 3, 5, 7], 1.0, &mut rng);
        let y = hg.forward(&g, g.constant(x.clone())).unwrap();
        assert_eq!(*g.value(y), x);
    }

    #[test]
    fn zero_gate_product_gives_half() {
        let cfg = ModelConfig {
            channels: 4,
            rdb_layers: 2,
            rdb_growth: 4,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agg = HrAggregation::new(&mut Builder::new(&mut store, &mut rng), &cfg).unwrap();
        let id = store.find("hr_aggregate.conv1.weight").unwrap();
        store.value_mut(id).data_mut().fill(0.0);
        let g = Graph::with_params(&store);
        let a = g.constant(Tensor::randn([1, 4, 6, 6], 1.0, &mut rng));
        let b = g.constant(Tensor::randn([1, 4, 6, 6], 1.0, &mut rng));
        assert!(g.value(agg.gate(&g, a, b).unwrap()).data().iter().all(|&v| v == 0.5));
    }
}
