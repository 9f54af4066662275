//! Acceptance criteria 1 to 10. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured quantities, then asserts.

use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereofb::attention::{attention_warp, disparity_from_coordinate, expected_coordinate, View};
use stereofb::autodiff::{Graph, PaddingMode, SampleDirection};
use stereofb::checkpoint;
use stereofb::config::RunConfig;
use stereofb::data::Dataset;
use stereofb::eval::{evaluate, EvalItem, StepSummary};
use stereofb::gradcheck::{network_case, op_cases, run_suite, GradCheckConfig};
use stereofb::hr_disparity::{partial_cost_volume, valid_masks};
use stereofb::metrics::{epe, psnr, ssim};
use stereofb::network::Network;
use stereofb::ssim::{ssim_map, SsimBorder};
use stereofb::synthetic::{scene_set, SyntheticScene};
use stereofb::train::{OutputDir, StepRecord, Trainer};
use stereofb::{Real, Tensor};

fn report(n: usize, pass: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

/// Serializes the CPU-heavy criteria so wall-clock budgets are not shared
/// with other tests.
fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Real {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_suite() {
    let _guard = heavy();
    let start = Instant::now();
    let mut results = run_suite(op_cases(1), &GradCheckConfig::default(), 1).unwrap();
    let cfg = RunConfig::desk();
    let case = network_case(&cfg.model, &cfg.loss, 8, 12, 0).unwrap();
    results.extend(run_suite(vec![case], &GradCheckConfig::piecewise_smooth(1e-4, 4), 0).unwrap());
    let elapsed = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|(_, r)| !r.passed).map(|(n, r)| format!("{n}={:.2e}", r.max_rel_err)).collect();
    let worst = results.iter().map(|(_, r)| r.max_rel_err).fold(0.0, Real::max);
    let pass = failed.is_empty() && elapsed < Duration::from_secs(300);
    report(
        1,
        pass,
        format!("{} cases, worst rel err {worst:.2e}, {:.1}s, failed {failed:?}", results.len(), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_attention_invariants() {
    let cfg = RunConfig::desk();
    let (net, store) = Network::init(&cfg.model, 5).unwrap();
    let g = Graph::inference(&store);
    let mut r = rng(2);
    let lr = [
        g.constant(Tensor::rand_uniform([1, 3, 8, 24], 0.0, 1.0, &mut r)),
        g.constant(Tensor::rand_uniform([1, 3, 8, 24], 0.0, 1.0, &mut r)),
    ];
    let trace = net.forward(&g, lr).unwrap();
    let mut row_err: Real = 0.0;
    for it in &trace.iterations {
        for v in &it.views {
            let m = g.value(v.map);
            let k = m.shape()[3];
            for row in m.data().chunks(k) {
                row_err = row_err.max((row.iter().sum::<Real>() - 1.0).abs());
            }
        }
    }

    // identity map reproduces the feature
    let (h, w) = (5, 9);
    let feat = Tensor::rand_uniform([1, 4, h, w], -1.0, 1.0, &mut r);
    let ident = Tensor::from_fn([1, h, w, w], |_, _, x, k| if x == k { 1.0 } else { 0.0 });
    let g = Graph::new();
    let warped = attention_warp(&g, g.constant(ident), g.constant(feat.clone())).unwrap();
    let ident_err = max_abs_diff(&g.value(warped), &feat);

    // shifted delta maps give the shift back through the expected coordinate
    let d = 3usize;
    let left_map = Tensor::from_fn([1, h, w, w], |_, _, x, k| if k + d == x || (x < d && k == 0) { 1.0 } else { 0.0 });
    let right_map = Tensor::from_fn([1, h, w, w], |_, _, x, k| if k == x + d || (x + d >= w && k == w - 1) { 1.0 } else { 0.0 });
    let mut shift_exact = true;
    for (map, view) in [(left_map, View::Left), (right_map, View::Right)] {
        let coord = expected_coordinate(&g, g.constant(map)).unwrap();
        let disp = g.value(disparity_from_coordinate(&g, coord, view).unwrap());
        for y in 0..h {
            for x in 0..w {
                let inside = match view {
                    View::Left => x >= d,
                    View::Right => x + d < w,
                };
                if inside {
                    shift_exact &= disp.at(0, 0, y, x) == d as Real;
                }
            }
        }
    }
    let pass = row_err <= 1e-6 && ident_err <= 1e-12 && shift_exact;
    report(
        2,
        pass,
        format!("row-sum err {row_err:.1e}, identity warp err {ident_err:.1e}, shift recovered exactly: {shift_exact}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_valid_mask_exactness() {
    let (h, w) = (4, 20);
    let g = Graph::new();
    let mask_for = |dl: Real, dr: Real| {
        let l = g.constant(Tensor::full([1, 1, h, w], dl));
        let r = g.constant(Tensor::full([1, 1, h, w], dr));
        let [vl, vr] = valid_masks(&g, [l, r]).unwrap();
        ((*g.value(vl)).clone(), (*g.value(vr)).clone())
    };
    // the cross-check is only defined where the other view is sampled
    // inside the image
    let mut consistent_ok = true;
    for d in [0.0, 2.5, 3.0] {
        let (vl, vr) = mask_for(d, d);
        for y in 0..h {
            for x in 0..w {
                if x as Real - d >= 0.0 {
                    consistent_ok &= vl.at(0, 0, y, x) == 1.0;
                }
                if x as Real + d <= (w - 1) as Real {
                    consistent_ok &= vr.at(0, 0, y, x) == 1.0;
                }
            }
        }
    }
    let (vl, _) = mask_for(7.0, 2.0);
    let expected = 1.0 - (1.0 as Real).tanh();
    let mut mismatch_err: Real = 0.0;
    for x in 0..w {
        if x >= 7 {
            mismatch_err = mismatch_err.max((vl.at(0, 0, 1, x) - expected).abs());
        }
    }
    let pass = consistent_ok && mismatch_err <= 1e-6;
    report(
        3,
        pass,
        format!(
            "consistent => V == 1: {consistent_ok}; 5 px mismatch V = {:.7} vs 1 - tanh(1) = {expected:.7} (err {mismatch_err:.1e})",
            vl.at(0, 0, 1, 10)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn bilinear(row: &[Real], u: Real) -> Real {
    let f = u.floor();
    let t = u - f;
    let i = f as isize;
    let at = |j: isize| if j >= 0 && (j as usize) < row.len() { row[j as usize] } else { 0.0 };
    (1.0 - t) * at(i) + t * at(i + 1)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, mode: PaddingMode) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, cout, oh, ow], |ni, co, oy, ox| {
        let mut s = b.at(0, co, 0, 0);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    let v = match mode {
                        PaddingMode::Zero => {
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                0.0
                            } else {
                                x.at(ni, ci, iy as usize, ix as usize)
                            }
                        }
                        PaddingMode::Reflect => x.at(ni, ci, reflect(iy, h), reflect(ix, wd)),
                    };
                    s += v * w.at(co, ci, ky, kx);
                }
            }
        }
        s
    })
}

fn naive_conv_transpose(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for ni in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xx * stride + kx) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let idx = ((ni * cout + co) * oh + oy as usize) * ow + ox as usize;
                                    out.data_mut()[idx] += x.at(ni, ci, y, xx) * w.at(ci, co, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, ybins: &[(usize, usize)], xbins: &[(usize, usize)]) -> Tensor {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, ybins.len(), xbins.len()], |ni, ci, i, j| {
        let (y0, y1) = ybins[i];
        let (x0, x1) = xbins[j];
        let mut s = 0.0;
        for y in y0..y1 {
            for xx in x0..x1 {
                s += x.at(ni, ci, y, xx);
            }
        }
        s / ((y1 - y0) * (x1 - x0)) as Real
    })
}

#[test]
fn criterion_04_kernel_oracles() {
    let (h, w, c) = (8, 12, 4);
    let mut worst = [0.0 as Real; 6];
    for seed in 0..5 {
        let mut r = rng(40 + seed);
        let own = Tensor::rand_uniform([1, c, h, w], -1.0, 1.0, &mut r);
        let other = Tensor::rand_uniform([1, c, h, w], -1.0, 1.0, &mut r);
        let p = 5;
        let hyp = Tensor::from_fn([1, p, h, w], |_, _, _, _| r.random_range(-1.0..6.0));
        let disp = Tensor::from_fn([1, 1, h, w], |_, _, _, _| r.random_range(-1.0..6.0));
        let g = Graph::new();

        // partial cost volume, both views
        for view in View::BOTH {
            let cost = g.value(partial_cost_volume(&g, g.constant(own.clone()), g.constant(other.clone()), g.constant(hyp.clone()), view).unwrap());
            let oracle = Tensor::from_fn([1, p, h, w], |_, j, y, x| {
                let u = match view {
                    View::Left => x as Real - hyp.at(0, j, y, x),
                    View::Right => x as Real + hyp.at(0, j, y, x),
                };
                (0..c)
                    .map(|ci| {
                        let row: Vec<Real> = (0..w).map(|k| other.at(0, ci, y, k)).collect();
                        own.at(0, ci, y, x) * bilinear(&row, u)
                    })
                    .sum::<Real>()
                    / c as Real
            });
            worst[0] = worst[0].max(max_abs_diff(&cost, &oracle));
        }

        // warp
        let out = g.warp(g.constant(other.clone()), g.constant(disp.clone()), SampleDirection::Minus).unwrap();
        let oracle = Tensor::from_fn([1, c, h, w], |_, ci, y, x| {
            let row: Vec<Real> = (0..w).map(|k| other.at(0, ci, y, k)).collect();
            bilinear(&row, x as Real - disp.at(0, 0, y, x))
        });
        worst[1] = worst[1].max(max_abs_diff(&g.value(out.warped), &oracle));

        // pooling: partial trailing windows, and adaptive bins
        let pooled = g.value(g.avg_pool(g.constant(own.clone()), 3).unwrap());
        let win = |len: usize| (0..len.div_ceil(3)).map(|i| (i * 3, (i * 3 + 3).min(len))).collect::<Vec<_>>();
        worst[2] = worst[2].max(max_abs_diff(&pooled, &naive_pool(&own, &win(h), &win(w))));
        let adaptive = g.value(g.adaptive_avg_pool(g.constant(own.clone()), 3).unwrap());
        let bins = |len: usize| (0..3).map(|i| ((i * len) / 3, ((i + 1) * len).div_ceil(3))).collect::<Vec<_>>();
        worst[3] = worst[3].max(max_abs_diff(&adaptive, &naive_pool(&own, &bins(h), &bins(w))));

        // convolution, zero and reflect padding, strides 1 and 2
        let wt = Tensor::rand_uniform([3, c, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform([1, 3, 1, 1], -1.0, 1.0, &mut r);
        for (stride, mode) in [(1, PaddingMode::Zero), (2, PaddingMode::Reflect), (2, PaddingMode::Zero)] {
            let y = g
                .conv2d(g.constant(own.clone()), g.constant(wt.clone()), Some(g.constant(b.clone())), stride, 1, mode)
                .unwrap();
            worst[4] = worst[4].max(max_abs_diff(&g.value(y), &naive_conv(&own, &wt, &b, stride, 1, mode)));
        }
        let wt_t = Tensor::rand_uniform([c, 3, 4, 4], -1.0, 1.0, &mut r);
        let y = g.conv_transpose2d(g.constant(own.clone()), g.constant(wt_t.clone()), None, 2, 1).unwrap();
        worst[5] = worst[5].max(max_abs_diff(&g.value(y), &naive_conv_transpose(&own, &wt_t, 2, 1)));
    }
    let pass = worst.iter().all(|&e| e <= 1e-10);
    report(
        4,
        pass,
        format!(
            "max err: cost volume {:.1e}, warp {:.1e}, avg pool {:.1e}, adaptive pool {:.1e}, conv {:.1e}, transposed conv {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_metric_oracles() {
    let a = Tensor::full([1, 3, 16, 16], 0.5);
    let b = a.map(|v| v + 16.0 / 255.0);
    let p = psnr(&a, &b, 100.0).unwrap();
    let closed = 20.0 * (255.0 as Real / 16.0).log10();
    let psnr_ok = (p - closed).abs() <= 1e-4;

    let mut r = rng(5);
    let img = Tensor::rand_uniform([1, 3, 20, 24], 0.0, 1.0, &mut r);
    let other = Tensor::rand_uniform([1, 3, 20, 24], 0.0, 1.0, &mut r);
    let self_ssim = ssim(&img, &img).unwrap();

    // EPE against an elementwise loop that includes invalid ground truth
    let pred = Tensor::rand_uniform([1, 1, 10, 14], 0.0, 8.0, &mut r);
    let mut gt = Tensor::rand_uniform([1, 1, 10, 14], 0.0, 8.0, &mut r);
    gt.data_mut()[3] = Real::INFINITY;
    gt.data_mut()[7] = -1.0;
    gt.data_mut()[11] = Real::NAN;
    let noc = Tensor::from_fn([1, 1, 10, 14], |_, _, y, x| if (x + y) % 3 == 0 { 0.0 } else { 1.0 });
    let e = epe(&pred, &gt, &noc).unwrap();
    let (mut s_all, mut n_all, mut s_noc, mut n_noc) = (0.0, 0, 0.0, 0);
    for i in 0..pred.len() {
        let t = gt.data()[i];
        if t.is_finite() && t >= 0.0 {
            let d = (pred.data()[i] - t).abs();
            s_all += d;
            n_all += 1;
            if noc.data()[i] > 0.5 {
                s_noc += d;
                n_noc += 1;
            }
        }
    }
    let epe_ok = e.epe_all == s_all / n_all as Real && e.epe_noc == s_noc / n_noc as Real && e.count_all == n_all;

    // loss-side (reflect-padded map) and metric-side SSIM agree on interior pixels
    let g = Graph::new();
    let (va, vb) = (g.constant(img.clone()), g.constant(other.clone()));
    let valid = g.value(ssim_map(&g, va, vb, SsimBorder::Valid).unwrap());
    let refl = g.value(ssim_map(&g, va, vb, SsimBorder::Reflect).unwrap());
    let [_, _, vh, vw] = valid.shape();
    let off = (20 - vh) / 2;
    let interior = Tensor::from_fn(valid.shape(), |n, c, y, x| refl.at(n, c, y + off, x + off));
    let map_err = max_abs_diff(&interior, &valid);
    let mean_err = (valid.data().iter().sum::<Real>() / (vh * vw * 3) as Real - ssim(&img, &other).unwrap()).abs();
    let ssim_ok = self_ssim == 1.0 && map_err <= 1e-12 && mean_err <= 1e-12;

    let pass = psnr_ok && epe_ok && ssim_ok;
    report(
        5,
        pass,
        format!(
            "psnr(16/255 offset) = {p:.4} dB vs closed form {closed:.4}; ssim(a,a) = {self_ssim}; epe exact: {epe_ok}; loss/metric ssim err {:.1e}",
            map_err.max(mean_err)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6, 7, 8, 9

/// Constant learning rate of the overfit run. With 4 samples and batch 4 an
/// epoch is one step, so the halving schedule is switched off. Larger rates
/// converge sooner but hit a transient around step 30, when the attention
/// maps sharpen, that breaks the monotone start.
const OVERFIT_LR: Real = 5e-4;
const OVERFIT_STEPS: usize = 2000;

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.lr = OVERFIT_LR;
    cfg.train.halve_every_epochs = None;
    cfg.train.steps = OVERFIT_STEPS;
    cfg.train.target_psnr = Some(40.0);
    cfg.train.checkpoint_every = 100;
    cfg
}

fn overfit_scenes() -> Vec<SyntheticScene> {
    scene_set(0, 4, 16, 48, 2, 8, 2).unwrap()
}

struct OverfitRun {
    records: Vec<StepRecord>,
    reached: bool,
    elapsed: Duration,
    dir: PathBuf,
    store: stereofb::nn::ParamStore,
    net: Network,
    // keeps the checkpoint directory alive
    _tmp: tempfile::TempDir,
}

fn overfit() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = heavy();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("overfit");
        let cfg = overfit_config();
        let data = Dataset::from_scenes(&overfit_scenes());
        let mut t = Trainer::new(&cfg, &data, Some(OutputDir::create(&dir).unwrap())).unwrap();
        let start = Instant::now();
        let outcome = t
            .run(|r| {
                if r.step % 100 == 0 {
                    eprintln!("overfit step {} psnr {:.3} loss {:.5}", r.step, r.psnr, r.loss.total);
                }
            })
            .unwrap();
        let elapsed = start.elapsed();
        OverfitRun {
            records: outcome.records,
            reached: outcome.reached_target,
            elapsed,
            dir,
            store: t.state.store.clone(),
            net: t.net.clone(),
            _tmp: tmp,
        }
    })
}

fn final_iteration(summary: &[StepSummary]) -> (&StepSummary, &StepSummary) {
    let last = summary.iter().map(|s| s.iteration).max().unwrap();
    let s1 = summary.iter().find(|s| s.iteration == last && s.step == 1).unwrap();
    let s2 = summary.iter().find(|s| s.iteration == last && s.step == 2).unwrap();
    (s1, s2)
}

#[test]
fn criterion_06_overfit() {
    let run = overfit();
    let first: Vec<Real> = run.records.iter().take(50).map(|r| r.loss.total).collect();
    let decreasing = first.len() == 50 && first.windows(2).all(|w| w[1] < w[0]);
    let best = run.records.iter().map(|r| r.psnr).fold(Real::NEG_INFINITY, Real::max);
    let steps = run.records.len();
    let in_time = run.elapsed < Duration::from_secs(30 * 60);
    let pass = run.reached && in_time && decreasing;
    report(
        6,
        pass,
        format!(
            "best train psnr {best:.3} dB after {steps} steps (target 40), {:.1} min, loss strictly decreasing over first 50 steps: {decreasing}",
            run.elapsed.as_secs_f64() / 60.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_coarse_to_fine() {
    let run = overfit();
    let items: Vec<EvalItem> = scene_set(1000, 8, 16, 48, 2, 8, 2)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, s)| EvalItem::from_scene(format!("held_out_{i}"), s))
        .collect();
    let rep = evaluate(&run.net, &run.store, &items).unwrap();
    let (s1, s2) = final_iteration(&rep.summary);
    let (lr_noc, hr_noc) = (s1.epe_noc.unwrap(), s2.epe_noc.unwrap());
    let (lr_all, hr_all) = (s1.epe_all.unwrap(), s2.epe_all.unwrap());
    let pass = hr_noc <= lr_noc;
    report(
        7,
        pass,
        format!("EPE noc: HR {hr_noc:.4} vs upsampled LR {lr_noc:.4}; EPE all: HR {hr_all:.4} vs {lr_all:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_step_progression() {
    let run = overfit();
    let items: Vec<EvalItem> = overfit_scenes()
        .iter()
        .enumerate()
        .map(|(i, s)| EvalItem::from_scene(format!("train_{i}"), s))
        .collect();
    let rep = evaluate(&run.net, &run.store, &items).unwrap();
    let (s1, s2) = final_iteration(&rep.summary);
    let progressed = s2.psnr_pair >= s1.psnr_pair;
    let detail = format!("final iteration psnr step 1 {:.3} -> step 2 {:.3}", s1.psnr_pair, s2.psnr_pair);
    if !run.reached {
        // an under-trained run only earns a warning
        report(8, progressed, format!("{detail} (WARNING only: overfit run did not reach its target)"));
        return;
    }
    report(8, progressed, detail);
    assert!(progressed);
}

#[test]
fn criterion_09_determinism() {
    let run = overfit();
    let _guard = heavy();
    let first = run.dir.join("checkpoints").join("step_000100.ckpt");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = overfit_config();
    cfg.train.steps = 100;
    cfg.train.target_psnr = None;
    let data = Dataset::from_scenes(&overfit_scenes());
    let out = OutputDir::create(tmp.path()).unwrap();
    let second = out.checkpoint_path(100);
    Trainer::new(&cfg, &data, Some(out)).unwrap().run(|_| {}).unwrap();
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    // both files must also decode
    checkpoint::load(&first).unwrap();
    checkpoint::load(&second).unwrap();
    let pass = a == b;
    report(9, pass, format!("step-100 checkpoints bit-identical: {} ({} bytes)", a == b, a.len()));
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_feedforward_equivalence() {
    let mut r = rng(10);
    let lr = [
        Tensor::rand_uniform([1, 3, 8, 24], 0.0, 1.0, &mut r),
        Tensor::rand_uniform([1, 3, 8, 24], 0.0, 1.0, &mut r),
    ];
    let mut results = Vec::new();
    for iterations in [1, 2] {
        let mut cfg = RunConfig::desk();
        cfg.model.feedback = false;
        cfg.model.iterations = iterations;
        let (net, store) = Network::init(&cfg.model, 10).unwrap();
        let outputs = |baseline: bool| -> Vec<Tensor> {
            let g = Graph::inference(&store);
            let x = [g.constant(lr[0].clone()), g.constant(lr[1].clone())];
            let trace = if baseline { net.forward_baseline(&g, x) } else { net.forward(&g, x) }.unwrap();
            trace
                .last()
                .views
                .iter()
                .flat_map(|v| [v.sr0, v.sr1, v.hr_disp, v.upsampled_disp])
                .map(|v| (*g.value(v)).clone())
                .collect()
        };
        let (recurrent, baseline) = (outputs(false), outputs(true));
        let identical = recurrent.iter().zip(&baseline).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        results.push((iterations, identical));
    }
    let pass = results.iter().all(|&(_, ok)| ok);
    report(10, pass, format!("feedback off vs feed-forward baseline, bit-identical per T: {results:?}"));
    assert!(pass);
}
