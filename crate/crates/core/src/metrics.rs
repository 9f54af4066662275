//! Image quality and disparity accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::{Real, Tensor};

/// Cropping and averaging convention for SR metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Columns removed from the left before measuring.
    pub crop_left: usize,
    /// Average the left and right views instead of reporting the left one.
    pub average_views: bool,
    /// PSNR reported for identical images.
    pub psnr_cap: Real,
}

impl EvalProtocol {
    /// Left view only, 64 columns cropped.
    pub fn left_view() -> Self {
        EvalProtocol {
            crop_left: 64,
            average_views: false,
            psnr_cap: 100.0,
        }
    }

    /// Mean of both views, no cropping.
    pub fn pair() -> Self {
        EvalProtocol {
            crop_left: 0,
            average_views: true,
            psnr_cap: 100.0,
        }
    }

    /// Crops an image; fails when the crop leaves nothing.
    pub fn crop(&self, img: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = img.shape();
        if self.crop_left >= w {
            return Err(Error::invalid(
                "eval_protocol",
                format!("crop of {} columns leaves nothing of width {w}", self.crop_left),
            ));
        }
        if self.crop_left == 0 {
            return Ok(img.clone());
        }
        let k = self.crop_left;
        Ok(Tensor::from_fn([n, c, h, w - k], |ni, ci, y, x| img.at(ni, ci, y, x + k)))
    }

    /// Applies the protocol to a metric evaluated on each view.
    pub fn combine(
        &self,
        pred: [&Tensor; 2],
        gt: [&Tensor; 2],
        metric: impl Fn(&Tensor, &Tensor) -> Result<Real>,
    ) -> Result<Real> {
        let left = metric(&self.crop(pred[0])?, &self.crop(gt[0])?)?;
        if !self.average_views {
            return Ok(left);
        }
        let right = metric(&self.crop(pred[1])?, &self.crop(gt[1])?)?;
        Ok((left + right) / 2.0)
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, `cap` when they are equal.
pub fn psnr(a: &Tensor, b: &Tensor, cap: Real) -> Result<Real> {
    ensure_shape("psnr", a.shape(), b.shape())?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / a.len() as Real;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

/// Mean SSIM over all channels, shared with the training loss.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Real> {
    crate::ssim::ssim(a, b)
}

/// End-point errors in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityEval {
    pub epe_all: Real,
    pub epe_noc: Real,
    pub count_all: usize,
    pub count_noc: usize,
}

/// Mean `|pred - gt|` over the valid ground-truth pixels (finite and
/// non-negative) and over those that are also non-occluded (`noc > 0.5`).
pub fn epe(pred: &Tensor, gt: &Tensor, noc: &Tensor) -> Result<DisparityEval> {
    ensure_shape("epe", pred.shape(), gt.shape())?;
    ensure_shape("epe", pred.shape(), noc.shape())?;
    let (mut all, mut n_all, mut non, mut n_noc) = (0.0, 0usize, 0.0, 0usize);
    for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(noc.data()) {
        if !t.is_finite() || t < 0.0 {
            continue;
        }
        let e = (p - t).abs();
        all += e;
        n_all += 1;
        if m > 0.5 {
            non += e;
            n_noc += 1;
        }
    }
    if n_all == 0 || n_noc == 0 {
        return Err(Error::invalid("epe", "no valid ground-truth pixels to evaluate"));
    }
    Ok(DisparityEval {
        epe_all: all / n_all as Real,
        epe_noc: non / n_noc as Real,
        count_all: n_all,
        count_noc: n_noc,
    })
}
