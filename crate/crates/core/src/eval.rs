//! Step-wise evaluation: PSNR/SSIM under both protocols and EPE for every
//! (iteration, reconstruction step), with CSV, JSON and plot-data output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::list_pairs;
use crate::error::{Error, Result};
use crate::io::{read_pfm, read_png};
use crate::metrics::{epe, psnr, ssim, EvalProtocol};
use crate::network::Network;
use crate::nn::ParamStore;
use crate::parallel;
use crate::synthetic::{downsample, SyntheticScene};
use crate::tensor::{Real, Tensor};

/// A stereo pair with optional left-view ground-truth disparity (HR pixels).
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub name: String,
    pub lr: [Tensor; 2],
    pub hr: [Tensor; 2],
    pub disparity: Option<Tensor>,
    pub non_occluded: Option<Tensor>,
}

/// `1` where `|D_l(x) - D_r(x - D_l(x))| <= threshold` and the match lies
/// inside the right image (nearest-pixel lookup).
pub fn cross_check_noc(left: &Tensor, right: &Tensor, threshold: Real) -> Tensor {
    let [n, _, h, w] = left.shape();
    Tensor::from_fn([n, 1, h, w], |ni, _, y, x| {
        let d = left.at(ni, 0, y, x);
        let u = (x as Real - d).round();
        if u < 0.0 || u > (w - 1) as Real {
            return 0.0;
        }
        let back = right.at(ni, 0, y, u as usize);
        if (d - back).abs() <= threshold {
            1.0
        } else {
            0.0
        }
    })
}

impl EvalItem {
    pub fn from_scene(name: impl Into<String>, s: &SyntheticScene) -> Self {
        EvalItem {
            name: name.into(),
            lr: s.lr.clone(),
            hr: s.hr.clone(),
            disparity: Some(s.disparity[0].clone()),
            non_occluded: Some(cross_check_noc(&s.disparity[0], &s.disparity[1], 1.0)),
        }
    }
}

/// An item that could not be loaded, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

/// Pairs from `dir/left`, `dir/right`; ground truth from
/// `dir/disparity/<stem>.pfm` and `dir/noc/<name>` (non-zero = visible) when present.
pub fn load_folder(dir: &Path, scale: usize) -> Result<(Vec<EvalItem>, Vec<Skipped>)> {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (l, r) in list_pairs(dir)? {
        let name = l.file_name().expect("listed file has a name").to_string_lossy().into_owned();
        let load = || -> Result<EvalItem> {
            let hr = [read_png(&l)?, read_png(&r)?];
            let [_, _, h, w] = hr[0].shape();
            let (h, w) = (h - h % scale, w - w % scale);
            let crop = |t: &Tensor| Tensor::from_fn([1, t.shape()[1], h, w], |_, c, y, x| t.at(0, c, y, x));
            let hr = [crop(&hr[0]), crop(&hr[1])];
            let lr = [downsample(&hr[0], scale)?, downsample(&hr[1], scale)?];
            let stem = l.file_stem().expect("listed file has a stem").to_string_lossy().into_owned();
            let dp = dir.join("disparity").join(format!("{stem}.pfm"));
            let disparity = if dp.exists() { Some(crop(&read_pfm(&dp)?)) } else { None };
            let np = dir.join("noc").join(&name);
            let non_occluded = if np.exists() {
                Some(crop(&read_png(&np)?).map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
                    .map(|t| Tensor::from_fn([1, 1, h, w], |_, _, y, x| t.at(0, 0, y, x)))
            } else {
                None
            };
            Ok(EvalItem {
                name: name.clone(),
                lr,
                hr,
                disparity,
                non_occluded,
            })
        };
        match load() {
            Ok(item) => items.push(item),
            Err(e) => skipped.push(Skipped {
                name: name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok((items, skipped))
}

/// Outputs of one reconstruction step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub sr: [Tensor; 2],
    /// HR-resolution disparity used by the step: the upsampled LR estimate
    /// for step 1, the refined HR estimate for step 2.
    pub disparity: [Tensor; 2],
}

/// Per iteration, step 1 then step 2.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub iterations: Vec<[StepOutput; 2]>,
}

impl Prediction {
    pub fn final_output(&self) -> &StepOutput {
        &self.iterations.last().expect("at least one iteration")[1]
    }
}

/// Runs the network without recording gradients.
pub fn predict(net: &Network, store: &ParamStore, lr: &[Tensor; 2]) -> Result<Prediction> {
    let g = Graph::inference(store);
    let x = [g.constant(lr[0].clone()), g.constant(lr[1].clone())];
    let trace = net.forward(&g, x)?;
    let val = |v| (*g.value(v)).clone();
    let iterations = trace
        .iterations
        .iter()
        .map(|it| {
            let [l, r] = &it.views;
            [
                StepOutput {
                    sr: [val(l.sr0), val(r.sr0)],
                    disparity: [val(l.upsampled_disp), val(r.upsampled_disp)],
                },
                StepOutput {
                    sr: [val(l.sr1), val(r.sr1)],
                    disparity: [val(l.hr_disp), val(r.hr_disp)],
                },
            ]
        })
        .collect();
    Ok(Prediction { iterations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    /// 1-based iteration.
    pub iteration: usize,
    /// 1 or 2.
    pub step: usize,
    /// Left view, left columns cropped; `None` when the image is too narrow.
    pub psnr_left: Option<Real>,
    pub ssim_left: Option<Real>,
    /// Mean of both views, uncropped.
    pub psnr_pair: Real,
    pub ssim_pair: Option<Real>,
    pub epe_all: Option<Real>,
    pub epe_noc: Option<Real>,
    /// Pair PSNR of step 2 at least that of step 1 in the same iteration.
    pub step2_ge_step1: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub iteration: usize,
    pub step: usize,
    pub psnr_pair: Real,
    pub ssim_pair: Option<Real>,
    pub epe_all: Option<Real>,
    pub epe_noc: Option<Real>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<StepSummary>,
    pub skipped: Vec<Skipped>,
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Rows for one item, `iterations x 2` of them.
pub fn evaluate_prediction(item: &EvalItem, pred: &Prediction) -> Result<Vec<EvalRow>> {
    let left = EvalProtocol::left_view();
    let pair = EvalProtocol::pair();
    let cap = pair.psnr_cap;
    let mut rows = Vec::with_capacity(pred.iterations.len() * 2);
    for (t, steps) in pred.iterations.iter().enumerate() {
        let mut pair_psnr = [0.0; 2];
        for (s, out) in steps.iter().enumerate() {
            let sr = [clamp01(&out.sr[0]), clamp01(&out.sr[1])];
            let srs = [&sr[0], &sr[1]];
            let hrs = [&item.hr[0], &item.hr[1]];
            let p_pair = pair.combine(srs, hrs, |a, b| psnr(a, b, cap))?;
            pair_psnr[s] = p_pair;
            let (epe_all, epe_noc) = match &item.disparity {
                Some(gt) => {
                    let noc = item.non_occluded.clone().unwrap_or_else(|| Tensor::full(gt.shape(), 1.0));
                    let e = epe(&out.disparity[0], gt, &noc)?;
                    (Some(e.epe_all), Some(e.epe_noc))
                }
                None => (None, None),
            };
            rows.push(EvalRow {
                image: item.name.clone(),
                iteration: t + 1,
                step: s + 1,
                psnr_left: left.combine(srs, hrs, |a, b| psnr(a, b, cap)).ok(),
                ssim_left: left.combine(srs, hrs, ssim).ok(),
                psnr_pair: p_pair,
                ssim_pair: pair.combine(srs, hrs, ssim).ok(),
                epe_all,
                epe_noc,
                step2_ge_step1: false,
            });
        }
        let ok = pair_psnr[1] >= pair_psnr[0];
        let n = rows.len();
        rows[n - 1].step2_ge_step1 = ok;
        rows[n - 2].step2_ge_step1 = ok;
    }
    Ok(rows)
}

fn mean_opt(values: impl Iterator<Item = Option<Real>>) -> Option<Real> {
    let v: Vec<Real> = values.collect::<Option<Vec<_>>>()?;
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<Real>() / v.len() as Real)
    }
}

pub fn summarise(rows: &[EvalRow]) -> Vec<StepSummary> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.iteration, r.step)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(it, st)| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| (r.iteration, r.step) == (it, st)).collect();
            StepSummary {
                iteration: it,
                step: st,
                psnr_pair: sel.iter().map(|r| r.psnr_pair).sum::<Real>() / sel.len() as Real,
                ssim_pair: mean_opt(sel.iter().map(|r| r.ssim_pair)),
                epe_all: mean_opt(sel.iter().map(|r| r.epe_all)),
                epe_noc: mean_opt(sel.iter().map(|r| r.epe_noc)),
            }
        })
        .collect()
}

/// Evaluates every item, in parallel across items.
pub fn evaluate(net: &Network, store: &ParamStore, items: &[EvalItem]) -> Result<EvalReport> {
    let per_item = parallel::map(items, |item| {
        let pred = predict(net, store, &item.lr)?;
        evaluate_prediction(item, &pred)
    });
    let mut rows = Vec::new();
    for r in per_item {
        rows.extend(r?);
    }
    let summary = summarise(&rows);
    Ok(EvalReport {
        rows,
        summary,
        skipped: Vec::new(),
    })
}

fn fmt_opt(v: Option<Real>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "image,iteration,step,psnr_left,ssim_left,psnr_pair,ssim_pair,epe_all,epe_noc,step2_ge_step1\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{},{},{}",
                r.image,
                r.iteration,
                r.step,
                fmt_opt(r.psnr_left),
                fmt_opt(r.ssim_left),
                r.psnr_pair,
                fmt_opt(r.ssim_pair),
                fmt_opt(r.epe_all),
                fmt_opt(r.epe_noc),
                r.step2_ge_step1
            );
        }
        s
    }

    /// `x y` series over the flattened (iteration, step) grid.
    pub fn plot_series(&self) -> Vec<(String, String)> {
        let mut psnr_s = String::from("# step psnr_pair\n");
        let mut epe_s = String::from("# step epe_all\n");
        for (i, s) in self.summary.iter().enumerate() {
            let _ = writeln!(psnr_s, "{} {:.6}", i + 1, s.psnr_pair);
            if let Some(e) = s.epe_all {
                let _ = writeln!(epe_s, "{} {:.6}", i + 1, e);
            }
        }
        vec![("plot_psnr.dat".into(), psnr_s), ("plot_epe.dat".into(), epe_s)]
    }

    /// Writes `report.json`, `report.csv`, `skipped.csv` and the plot files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.json", &serde_json::to_string_pretty(self)?)?;
        self.write_derived(dir)
    }

    /// The CSV and plot files, regenerated from the JSON alone.
    pub fn write_derived(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", &self.to_csv())?;
        let mut skipped = String::from("image,reason\n");
        for s in &self.skipped {
            let _ = writeln!(skipped, "{},\"{}\"", s.name, s.reason.replace('"', "'"));
        }
        put("skipped.csv", &skipped)?;
        for (name, text) in self.plot_series() {
            put(&name, &text)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthetic::{SyntheticScene, Texture};

    fn perfect(item: &EvalItem, iterations: usize) -> Prediction {
        let d = item.disparity.clone().unwrap();
        let step = StepOutput {
            sr: item.hr.clone(),
            disparity: [d.clone(), d],
        };
        Prediction {
            iterations: (0..iterations).map(|_| [step.clone(), step.clone()]).collect(),
        }
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = SyntheticScene::generate(0, 16, 96, 5, Texture::FilteredNoise, 2).unwrap();
        let item = EvalItem::from_scene("a", &s);
        let rows = evaluate_prediction(&item, &perfect(&item, 2)).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.psnr_pair, 100.0);
            assert_eq!(r.psnr_left, Some(100.0));
            assert_eq!(r.ssim_pair, Some(1.0));
            assert_eq!((r.epe_all, r.epe_noc), (Some(0.0), Some(0.0)));
            assert!(r.step2_ge_step1);
        }
    }

    #[test]
    fn cross_check_matches_constructed_occlusion() {
        let s = SyntheticScene::generate(1, 8, 40, 6, Texture::Gradients, 2).unwrap();
        assert_eq!(cross_check_noc(&s.disparity[0], &s.disparity[1], 1.0), s.non_occluded[0]);
    }

    #[test]
    fn row_count_and_csv_are_stable() {
        let model = ModelConfig {
            channels: 4,
            rdb_blocks: 1,
            rdb_layers: 2,
            rdb_growth: 4,
            cascade: 1,
            hypotheses: 4,
            search_range: 4.0,
            ..ModelConfig::default()
        };
        let (net, store) = Network::init(&model, 0).unwrap();
        let items: Vec<EvalItem> = (0..3)
            .map(|i| {
                let s = SyntheticScene::generate(i, 16, 32, 2 + i as usize, Texture::FilteredNoise, 2).unwrap();
                EvalItem::from_scene(format!("s{i}"), &s)
            })
            .collect();
        let report = evaluate(&net, &store, &items).unwrap();
        assert_eq!(report.rows.len(), 3 * 2 * 2);
        assert_eq!(report.summary.len(), 4);
        // narrow images cannot take the 64-column crop
        assert!(report.rows.iter().all(|r| r.psnr_left.is_none()));
        let again = evaluate(&net, &store, &items).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());

        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back = EvalReport::read(dir.path()).unwrap();
        assert_eq!(back.to_csv(), report.to_csv());
        let plot = fs::read_to_string(dir.path().join("plot_psnr.dat")).unwrap();
        assert_eq!(plot.lines().count(), 5);
    }
}
