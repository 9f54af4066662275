//! Training objective: L1 on every SR output, attention losses on the LR
//! maps, and unsupervised photometric, smoothness, cycle and consistency
//! losses on the disparities.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_warp, View};
use crate::autodiff::{Graph, PaddingMode, SampleDirection, Var};
use crate::config::LossConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::network::Trace;
use crate::ssim::{ssim_map, SsimBorder};
use crate::tensor::{Real, Tensor};

/// Attention loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BipamTerms {
    pub photo: Real,
    pub cycle: Real,
    pub smooth: Real,
    pub cons: Real,
}

impl BipamTerms {
    pub fn total(&self) -> Real {
        self.photo + self.cycle + self.smooth + self.cons
    }
}

/// Disparity loss components; `smooth` is unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DispTerms {
    pub rc: Real,
    pub cycle_hr: Real,
    pub cons_hr: Real,
    pub smooth: Real,
}

impl DispTerms {
    pub fn total(&self, smooth_weight: Real) -> Real {
        self.rc + self.cycle_hr + self.cons_hr + smooth_weight * self.smooth
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: Real,
    pub sr: Real,
    pub bipam: Real,
    pub disp: Real,
    pub bipam_terms: BipamTerms,
    pub disp_terms: DispTerms,
    /// Masked terms skipped because their mask was empty.
    pub empty_masks: usize,
}

impl LossReport {
    /// `total = sr + lambda1 * bipam + lambda2 * disp`.
    pub fn combine(sr: Real, bipam_terms: BipamTerms, disp_terms: DispTerms, cfg: &LossConfig) -> Self {
        let bipam = bipam_terms.total();
        let disp = disp_terms.total(cfg.smooth_weight);
        LossReport {
            total: sr + cfg.lambda1 * bipam + cfg.lambda2 * disp,
            sr,
            bipam,
            disp,
            bipam_terms,
            disp_terms,
            empty_masks: 0,
        }
    }
}

/// Differentiable total loss and its breakdown.
pub struct Loss {
    pub total: Var,
    pub report: LossReport,
}

/// Weighted mean of `x` over the pixels of `mask` (`N x 1 x H x W`, may be
/// on the tape), counting every channel; `None` when the mask is empty.
pub fn masked_mean(g: &Graph, x: Var, mask: Var) -> Result<Option<Var>> {
    let [n, c, h, w] = g.shape(x);
    let ms = g.shape(mask);
    if ms != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "masked_mean",
            lhs: [n, 1, h, w],
            rhs: ms,
        });
    }
    let den = g.scale(g.sum(mask), c as Real);
    if !(g.value(den).item() > 0.0) {
        return Ok(None);
    }
    let num = g.sum(g.mul(x, mask)?);
    Ok(Some(g.div(num, den)?))
}

/// Running sum of scalar terms that also counts skipped (empty-mask) terms.
struct Accum<'g, 'p> {
    g: &'g Graph<'p>,
    sum: Option<Var>,
    empty: usize,
}

impl<'g, 'p> Accum<'g, 'p> {
    fn new(g: &'g Graph<'p>) -> Self {
        Accum { g, sum: None, empty: 0 }
    }

    fn push(&mut self, v: Var) -> Result<()> {
        self.sum = Some(match self.sum {
            None => v,
            Some(s) => self.g.add(s, v)?,
        });
        Ok(())
    }

    fn push_masked(&mut self, v: Option<Var>) -> Result<()> {
        match v {
            Some(v) => self.push(v),
            None => {
                self.empty += 1;
                Ok(())
            }
        }
    }

    fn finish(self) -> Var {
        self.sum.unwrap_or_else(|| self.g.scalar(0.0))
    }
}

/// Sum over iterations, views and both reconstruction steps of the mean
/// absolute error against the HR ground truth.
pub fn sr_loss(g: &Graph, trace: &Trace, hr: [Var; 2]) -> Result<Var> {
    if trace.iterations.is_empty() {
        return Err(Error::invalid("sr_loss", "trace has no iterations"));
    }
    let mut acc = Accum::new(g);
    for it in &trace.iterations {
        for view in View::BOTH {
            let step = &it.views[view.index()];
            for sr in [step.sr0, step.sr1] {
                acc.push(g.mean(g.abs(g.sub(sr, hr[view.index()])?)))?;
            }
        }
    }
    Ok(acc.finish())
}

/// Per-pixel `alpha (1 - SSIM) / 2 + (1 - alpha) |a - b|`, channel-averaged
/// to `N x 1 x H x W`.
pub fn photometric_error(g: &Graph, a: Var, b: Var, alpha: Real) -> Result<Var> {
    ensure_shape("photometric_error", g.shape(a), g.shape(b))?;
    let c = g.shape(a)[1] as Real;
    let l1 = g.abs(g.sub(a, b)?);
    let per = if alpha > 0.0 {
        let s = ssim_map(g, a, b, SsimBorder::Reflect)?;
        let dssim = g.scale(g.add_scalar(g.neg(s), 1.0), alpha / 2.0);
        g.add(dssim, g.scale(l1, 1.0 - alpha))?
    } else {
        l1
    };
    Ok(g.scale(g.sum_axis(per, 1)?, 1.0 / c))
}

/// Photometric reconstruction of `hr_own` from `hr_other` warped by `disp`,
/// averaged over `mask`.
pub fn reconstruction_term(
    g: &Graph,
    hr_own: Var,
    hr_other: Var,
    disp: Var,
    dir: SampleDirection,
    mask: Var,
    alpha: Real,
) -> Result<Option<Var>> {
    let warped = g.warp(hr_other, disp, dir)?;
    let err = photometric_error(g, hr_own, warped.warped, alpha)?;
    let in_view = g.constant(warped.in_view);
    masked_mean(g, err, g.mul(mask, in_view)?)
}

/// Edge-aware first-order smoothness: forward differences of `disp` weighted
/// by `exp(-|image gradient|)` (channel mean), x and y terms each averaged
/// over the pixels of `mask` and summed.
pub fn smoothness_loss(g: &Graph, disp: Var, image: Var, mask: Var) -> Result<Var> {
    let [n, _, h, w] = g.shape(disp);
    let [_, c, ih, iw] = g.shape(image);
    if (ih, iw) != (h, w) || g.shape(mask) != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "smoothness_loss",
            lhs: g.shape(disp),
            rhs: g.shape(image),
        });
    }
    let mut acc = Accum::new(g);
    // (y0, x0) offset of the second sample, size of the difference grid
    for (dy, dx, hh, ww) in [(0, 1, h, w.saturating_sub(1)), (1, 0, h.saturating_sub(1), w)] {
        if hh == 0 || ww == 0 {
            continue;
        }
        let diff = |v: Var| -> Result<Var> {
            let a = g.crop2d(v, dy, dx, hh, ww)?;
            let b = g.crop2d(v, 0, 0, hh, ww)?;
            Ok(g.abs(g.sub(a, b)?))
        };
        let grad_d = diff(disp)?;
        let grad_i = g.scale(g.sum_axis(diff(image)?, 1)?, 1.0 / c as Real);
        let weight = g.exp(g.neg(grad_i));
        let m = g.crop2d(mask, 0, 0, hh, ww)?;
        acc.push_masked(masked_mean(g, g.mul(grad_d, weight)?, m)?)?;
    }
    Ok(acc.finish())
}

/// Image minus its 3x3 box blur (reflect border), per channel.
pub fn high_pass(g: &Graph, image: Var) -> Result<Var> {
    let [n, c, h, w] = g.shape(image);
    let planes = g.reshape(image, [n * c, 1, h, w])?;
    let kernel = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
    let blur = g.conv2d(planes, kernel, None, 1, 1, PaddingMode::Reflect)?;
    g.reshape(g.sub(planes, blur)?, [n, c, h, w])
}

/// Mean over rows and columns of `|M(i, j, k) - M(i + 1, j, k)|` plus
/// `|M(i, j, k) - M(i, j + 1, k + 1)|`.
pub fn attention_smoothness(g: &Graph, map: Var) -> Result<Var> {
    let [_, h, w, k] = g.shape(map);
    let mut acc = Accum::new(g);
    if h > 1 {
        let a = g.slice(map, 1, 1, h - 1)?;
        let b = g.slice(map, 1, 0, h - 1)?;
        acc.push(g.mean(g.abs(g.sub(a, b)?)))?;
    }
    if w > 1 && k > 1 {
        let a = g.crop2d(map, 1, 1, w - 1, k - 1)?;
        let b = g.crop2d(map, 0, 0, w - 1, k - 1)?;
        acc.push(g.mean(g.abs(g.sub(a, b)?)))?;
    }
    Ok(acc.finish())
}

/// The four attention loss terms for one pair of maps, as differentiable
/// scalars `[photo, cycle, smooth, cons]`.
pub fn bipam_terms(
    g: &Graph,
    maps: [Var; 2],
    lr: [Var; 2],
    valid: &[Tensor; 2],
    residual: bool,
) -> Result<([Var; 4], usize)> {
    ensure_shape("bipam_loss", g.shape(lr[0]), g.shape(lr[1]))?;
    let [n, _, h, w] = g.shape(lr[0]);
    let hp = if residual {
        [high_pass(g, lr[0])?, high_pass(g, lr[1])?]
    } else {
        lr
    };
    let eye = g.constant(Tensor::from_fn([1, 1, w, w], |_, _, i, j| if i == j { 1.0 } else { 0.0 }));
    let (mut photo, mut cycle, mut smooth, mut cons) = (Accum::new(g), Accum::new(g), Accum::new(g), Accum::new(g));
    for view in View::BOTH {
        let (v, o) = (view.index(), view.other().index());
        let mask = g.constant(valid[v].clone());
        let warped = attention_warp(g, maps[v], lr[o])?;
        photo.push_masked(masked_mean(g, g.abs(g.sub(lr[v], warped)?), mask)?)?;

        let warped_hp = attention_warp(g, maps[v], hp[o])?;
        cons.push_masked(masked_mean(g, g.abs(g.sub(hp[v], warped_hp)?), mask)?)?;

        let round = g.bmm(maps[v], maps[o])?;
        let dev = g.sum_axis(g.abs(g.sub(round, eye)?), 3)?; // n, h, w, 1
        let dev = g.scale(g.reshape(dev, [n, 1, h, w])?, 1.0 / w as Real);
        cycle.push_masked(masked_mean(g, dev, mask)?)?;

        smooth.push(attention_smoothness(g, maps[v])?)?;
    }
    let empty = photo.empty + cycle.empty + cons.empty;
    Ok(([photo.finish(), cycle.finish(), smooth.finish(), cons.finish()], empty))
}

/// HR cycle and consistency terms for both views, `[cycle, cons]`:
/// consistency `|D_v - warp(D_o, D_v)|`, cycle `|D_v - warp(warp(D_v, D_o), D_v)|`,
/// each averaged over `valid[v]` times the in-view mask of the outer warp.
pub fn hr_cycle_consistency(g: &Graph, disp: [Var; 2], valid: [Var; 2]) -> Result<([Var; 2], usize)> {
    let (mut cycle, mut cons) = (Accum::new(g), Accum::new(g));
    for view in View::BOTH {
        let (v, o) = (view.index(), view.other().index());
        let dir = view.sample_direction();
        let cross = g.warp(disp[o], disp[v], dir)?;
        let mask = g.mul(valid[v], g.constant(cross.in_view))?;
        cons.push_masked(masked_mean(g, g.abs(g.sub(disp[v], cross.warped)?), mask)?)?;

        let there = g.warp(disp[v], disp[o], view.other().sample_direction())?.warped;
        let back = g.warp(there, disp[v], dir)?.warped;
        cycle.push_masked(masked_mean(g, g.abs(g.sub(disp[v], back)?), mask)?)?;
    }
    let empty = cycle.empty + cons.empty;
    Ok(([cycle.finish(), cons.finish()], empty))
}

/// The full objective over every iteration of `trace`.
pub fn total_loss(g: &Graph, trace: &Trace, lr: [Var; 2], hr: [Var; 2], cfg: &LossConfig) -> Result<Loss> {
    let sr = sr_loss(g, trace, hr)?;
    let mut empty = 0;
    let mut bipam: [Accum; 4] = std::array::from_fn(|_| Accum::new(g));
    let mut rc = Accum::new(g);
    let (mut cycle_hr, mut cons_hr, mut smooth) = (Accum::new(g), Accum::new(g), Accum::new(g));
    for it in &trace.iterations {
        let maps = [it.views[0].map, it.views[1].map];
        let (terms, e) = bipam_terms(g, maps, lr, &it.lr_valid, cfg.residual)?;
        empty += e;
        for (acc, t) in bipam.iter_mut().zip(terms) {
            acc.push(t)?;
        }

        let valid = [it.views[0].valid, it.views[1].valid];
        for view in View::BOTH {
            let (v, o) = (view.index(), view.other().index());
            let step = &it.views[v];
            for d in [step.upsampled_disp, step.hr_disp] {
                let term = reconstruction_term(g, hr[v], hr[o], d, view.sample_direction(), valid[v], cfg.alpha)?;
                rc.push_masked(term)?;
            }
            smooth.push(smoothness_loss(g, step.hr_disp, hr[v], valid[v])?)?;
        }
        let disp = [it.views[0].hr_disp, it.views[1].hr_disp];
        let ([cy, co], e) = hr_cycle_consistency(g, disp, valid)?;
        empty += e;
        cycle_hr.push(cy)?;
        cons_hr.push(co)?;
    }
    empty += rc.empty + smooth.empty;

    let [photo, cycle, smooth_att, cons] = bipam.map(|a| a.finish());
    let bipam_terms = BipamTerms {
        photo: g.value(photo).item(),
        cycle: g.value(cycle).item(),
        smooth: g.value(smooth_att).item(),
        cons: g.value(cons).item(),
    };
    let (rc, cycle_hr, cons_hr, smooth) = (rc.finish(), cycle_hr.finish(), cons_hr.finish(), smooth.finish());
    let disp_terms = DispTerms {
        rc: g.value(rc).item(),
        cycle_hr: g.value(cycle_hr).item(),
        cons_hr: g.value(cons_hr).item(),
        smooth: g.value(smooth).item(),
    };

    let bipam_sum = g.add(g.add(photo, cycle)?, g.add(smooth_att, cons)?)?;
    let disp_sum = g.add(g.add(rc, cycle_hr)?, g.add(cons_hr, g.scale(smooth, cfg.smooth_weight))?)?;
    let total = g.add(sr, g.add(g.scale(bipam_sum, cfg.lambda1), g.scale(disp_sum, cfg.lambda2))?)?;

    let mut report = LossReport::combine(g.value(sr).item(), bipam_terms, disp_terms, cfg);
    report.total = g.value(total).item();
    report.empty_masks = empty;
    Ok(Loss { total, report })
}
