//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{FilterAxis, Graph, PaddingMode, SampleDirection, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::Resample;
use crate::losses::{photometric_error, total_loss};
use crate::network::Network;
use crate::nn::{ParamId, ParamStore};
use crate::ssim::{ssim_map, SsimBorder};
use crate::synthetic::{SyntheticScene, Texture};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Difference steps tried in order until one agrees. A single step
    /// cannot serve a piecewise-smooth composite: large gradients need it
    /// small to beat curvature, tiny ones need it large to beat rounding.
    pub steps: Vec<Real>,
    /// Pass threshold on the relative error.
    pub tol: Real,
    /// Added to the denominator so near-zero gradients compare absolutely.
    pub atol: Real,
    /// Entries sampled per parameter tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
    /// Also accept agreement with the forward or backward difference. For
    /// piecewise-smooth composites, where a kink inside `[x - h, x + h]`
    /// corrupts the central difference but leaves one side intact.
    pub one_sided: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            steps: vec![1e-5],
            tol: 1e-4,
            atol: 1e-7,
            max_entries: None,
            one_sided: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: Real,
    /// Largest analytic gradient magnitude among the checked entries.
    pub max_abs_grad: Real,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: Real,
    pub tol: Real,
    pub passed: bool,
}

impl GradCheckConfig {
    /// For whole-network objectives built from PReLU, abs, clamp and
    /// bilinear sampling. Gradients below `atol` sit at the rounding floor
    /// of the difference quotient and are compared near-absolutely.
    pub fn piecewise_smooth(tol: Real, max_entries: usize) -> Self {
        GradCheckConfig {
            steps: vec![1e-5, 3e-6, 3e-5, 1e-6, 1e-4],
            tol,
            atol: 1e-6,
            max_entries: Some(max_entries),
            one_sided: true,
        }
    }
}

/// `|a - n| / (max(|a|, |n|) + atol)`.
pub fn relative_error(analytic: Real, numeric: Real, atol: Real) -> Real {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + atol)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<Real>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let g = Graph::inference(store);
    let loss = f(&g)?;
    let shape = g.shape(loss);
    if shape != [1, 1, 1, 1] {
        return Err(Error::invalid(
            "gradcheck",
            format!("function must return a scalar, got {shape:?}"),
        ));
    }
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of the scalar `f` with respect to every
/// tensor in `store` against central differences. `f` reads its inputs
/// through [`Graph::param`], so inputs and weights are checked alike.
pub fn check<F, R>(store: &ParamStore, f: F, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&Graph) -> Result<Var>,
    R: Rng,
{
    let base = evaluate(store, &f)?;
    let again = evaluate(store, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base as f64,
            second: again as f64,
        });
    }
    let g = Graph::with_params(store);
    let loss = f(&g)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    let mut params = Vec::new();
    let mut worst: Real = 0.0;
    for id in store.ids() {
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| crate::tensor::Tensor::zeros(store.value(id).shape()));
        let len = analytic.len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < len => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut max_rel: Real = 0.0;
        let mut max_abs: Real = 0.0;
        for &i in &entries {
            let a = analytic.data()[i];
            let mut rel = Real::INFINITY;
            for &h in &cfg.steps {
                let (plus, minus) = perturbed(&mut work, id, i, h, &f)?;
                rel = rel.min(relative_error(a, (plus - minus) / (2.0 * h), cfg.atol));
                if cfg.one_sided {
                    rel = rel
                        .min(relative_error(a, (plus - base) / h, cfg.atol))
                        .min(relative_error(a, (base - minus) / h, cfg.atol));
                }
                if rel < cfg.tol {
                    break;
                }
            }
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(a.abs());
        }
        worst = worst.max(max_rel);
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries: entries.len(),
            max_rel_err: max_rel,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_err: worst,
        tol: cfg.tol,
        passed: worst < cfg.tol,
    })
}

/// Objective values with entry `i` of `id` moved by `+h` and `-h`.
fn perturbed<F>(store: &mut ParamStore, id: ParamId, i: usize, h: Real, f: &F) -> Result<(Real, Real)>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let orig = store.value(id).data()[i];
    store.value_mut(id).data_mut()[i] = orig + h;
    let plus = evaluate(store, f);
    store.value_mut(id).data_mut()[i] = orig - h;
    let minus = evaluate(store, f);
    store.value_mut(id).data_mut()[i] = orig;
    Ok((plus?, minus?))
}

/// One named check of the suite.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&Graph) -> Result<Var>>,
}

/// Fixed pseudo-random weighting that turns any output into a scalar with
/// a dense, non-degenerate gradient.
pub fn probe(g: &Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let seed = shape.iter().fold(17u64, |a, &d| a.wrapping_mul(31).wrapping_add(d as u64));
    let w = Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(g.sum(g.mul(y, g.constant(w))?))
}

/// Entries with magnitude in `[0.1, 1]` and random sign: clear of the kink
/// at zero by much more than the difference step.
fn off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: Real = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Displacements whose fractional part lies in `[0.2, 0.8]`, clear of the
/// bilinear kinks at integer sample positions.
fn off_integer(shape: Shape, lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi) as Real + rng.random_range(0.2..0.8))
}

fn case<const K: usize>(
    name: &'static str,
    inputs: [(&str, Tensor); K],
    f: impl Fn(&Graph, [Var; K]) -> Result<Var> + 'static,
) -> Case {
    let mut store = ParamStore::default();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .map(|(n, t)| store.add(n, t).expect("distinct input names"))
        .collect();
    Case {
        name,
        store,
        f: Box::new(move |g| {
            let vars: [Var; K] = std::array::from_fn(|i| g.param(ids[i]));
            let y = f(g, vars)?;
            probe(g, y)
        }),
    }
}

/// Every differentiable primitive, each on a small random input.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: Shape| Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let s = [2, 3, 4, 5];
    let (a, b, pos) = (u(s), u(s), u(s).map(|v| 1.5 + v));
    let conv_x = u([1, 2, 6, 7]);
    let conv_w = u([3, 2, 3, 3]);
    let conv_b = u([1, 3, 1, 1]);
    let tconv_w = u([2, 3, 4, 4]);
    let tconv_b = u([1, 3, 1, 1]);
    let feat = u([1, 2, 3, 8]);
    let other = u([1, 2, 3, 8]);
    let (bm_a, bm_b) = (u([2, 2, 3, 4]), u([2, 2, 4, 5]));
    let ps = u([1, 8, 3, 4]);
    let big = u([1, 2, 7, 9]);
    let alpha = u([1, 3, 1, 1]);
    let weights = u([1, 1, 4, 5]).map(|v| v.abs() + 0.1);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let kinked = off_zero(s, &mut r);
    let clampable = off_zero(s, &mut r).map(|v| if v.abs() > 0.45 && v.abs() < 0.55 { v * 1.5 } else { v });
    let disp = off_integer([1, 1, 3, 8], -2, 4, &mut r);
    let hyp = off_integer([1, 3, 3, 8], -2, 4, &mut r);
    let ry = Rc::new(Resample::bicubic_up(3, 2));
    let rx = Rc::new(Resample::bicubic_down(8, 2));

    vec![
        case("add", [("a", a.clone()), ("b", b.clone())], |g, [x, y]| g.add(x, y)),
        case("sub", [("a", a.clone()), ("b", b.clone())], |g, [x, y]| g.sub(x, y)),
        case("mul", [("a", a.clone()), ("b", b.clone())], |g, [x, y]| g.mul(x, y)),
        case("div", [("a", a.clone()), ("b", pos.clone())], |g, [x, y]| g.div(x, y)),
        case("broadcast_mul", [("a", a.clone()), ("w", alpha.clone())], |g, [x, y]| g.mul(x, y)),
        case("scale_shift_neg", [("a", a.clone())], |g, [x]| Ok(g.neg(g.add_scalar(g.scale(x, 1.7), 0.3)))),
        case("abs", [("a", kinked.clone())], |g, [x]| Ok(g.abs(x))),
        case("square", [("a", a.clone())], |g, [x]| Ok(g.square(x))),
        case("exp", [("a", a.clone())], |g, [x]| Ok(g.exp(x))),
        case("tanh", [("a", a.clone())], |g, [x]| Ok(g.tanh(x))),
        case("sigmoid", [("a", a.clone())], |g, [x]| Ok(g.sigmoid(x))),
        case("relu", [("a", kinked.clone())], |g, [x]| Ok(g.relu(x))),
        case("clamp", [("a", clampable)], |g, [x]| Ok(g.clamp(x, -0.5, 0.5))),
        case("prelu", [("a", kinked.clone()), ("alpha", alpha)], |g, [x, al]| g.prelu(x, al)),
        case("sum_mean", [("a", a.clone())], |g, [x]| Ok(g.add(g.sum(x), g.scale(g.mean(x), 3.0))?)),
        case("sum_axis", [("a", a.clone())], |g, [x]| g.sum_axis(x, 1)),
        case("mean_hw", [("a", a.clone())], |g, [x]| Ok(g.mean_hw(x))),
        case("weighted_mean", [("a", a.clone())], move |g, [x]| g.weighted_mean(x, &weights)),
        case("bmm", [("a", bm_a), ("b", bm_b)], |g, [x, y]| g.bmm(x, y)),
        case("softmax_w", [("a", a.clone())], |g, [x]| g.softmax(x, 3)),
        case("softmax_c", [("a", a.clone())], |g, [x]| g.softmax(x, 1)),
        case("conv2d_zero", [("x", conv_x.clone()), ("w", conv_w.clone()), ("b", conv_b.clone())], |g, [x, w, b]| {
            g.conv2d(x, w, Some(b), 1, 1, PaddingMode::Zero)
        }),
        case("conv2d_reflect_stride2", [("x", conv_x.clone()), ("w", conv_w), ("b", conv_b)], |g, [x, w, b]| {
            g.conv2d(x, w, Some(b), 2, 1, PaddingMode::Reflect)
        }),
        case("conv_transpose2d", [("x", conv_x.clone()), ("w", tconv_w), ("b", tconv_b)], |g, [x, w, b]| {
            g.conv_transpose2d(x, w, Some(b), 2, 1)
        }),
        case("filter1d_rows_reflect", [("a", big.clone())], |g, [x]| {
            g.filter1d(x, &[0.3, -0.6, 1.1], FilterAxis::Horizontal, 1, PaddingMode::Reflect)
        }),
        case("filter1d_cols_zero", [("a", big.clone())], |g, [x]| {
            g.filter1d(x, &[0.3, -0.6, 1.1, 0.4], FilterAxis::Vertical, 2, PaddingMode::Zero)
        }),
        case("avg_pool", [("a", big.clone())], |g, [x]| g.avg_pool(x, 2)),
        case("adaptive_avg_pool", [("a", big.clone())], |g, [x]| g.adaptive_avg_pool(x, 3)),
        case("reshape_permute", [("a", a.clone())], |g, [x]| {
            let y = g.reshape(x, [3, 2, 5, 4])?;
            g.permute(y, [2, 0, 3, 1])
        }),
        case("concat_slice", [("a", a.clone()), ("b", b)], |g, [x, y]| {
            let c = g.concat(&[x, y], 1)?;
            g.slice(c, 1, 2, 3)
        }),
        case("crop_pad", [("a", big.clone())], |g, [x]| {
            let c = g.crop2d(x, 1, 2, 4, 5)?;
            Ok(g.pad2d(c, 2, 1))
        }),
        case("pixel_shuffle", [("a", ps.clone())], |g, [x]| g.pixel_shuffle(x, 2)),
        case("space_to_depth", [("a", big.clone())], |g, [x]| {
            let c = g.crop2d(x, 0, 0, 6, 8)?;
            g.space_to_depth(c, 2)
        }),
        case("upsample_nearest", [("a", ps)], |g, [x]| Ok(g.upsample_nearest(x, 7, 9))),
        case("resample", [("a", feat.clone())], move |g, [x]| g.resample(x, ry.clone(), rx.clone())),
        case("warp", [("f", feat.clone()), ("d", disp)], |g, [f, d]| {
            Ok(g.warp(f, d, SampleDirection::Minus)?.warped)
        }),
        case("correlation", [("a", feat), ("b", other), ("h", hyp)], |g, [a, b, h]| {
            g.correlation(a, b, h, SampleDirection::Plus)
        }),
        case("ssim_map", [("a", big.map(|v| 0.5 + 0.4 * v)), ("b", u([1, 2, 7, 9]).map(|v| 0.5 + 0.4 * v))], |g, [x, y]| {
            ssim_map(g, x, y, SsimBorder::Reflect)
        }),
        case("photometric_error", [("a", conv_x.map(|v| 0.5 + 0.4 * v)), ("b", u([1, 2, 6, 7]).map(|v| 0.5 + 0.4 * v))], |g, [x, y]| {
            photometric_error(g, x, y, 0.85)
        }),
    ]
}

/// The training objective of a full recurrent forward pass, checked with
/// respect to every weight tensor and both LR inputs.
///
/// Biases start at zero, which puts activations fed by an exactly-zero
/// residual (unmatched pixels) on the PReLU kink. They are jittered so the
/// check runs at a point where the objective is differentiable.
pub fn network_case(model: &ModelConfig, loss: &LossConfig, lr_h: usize, lr_w: usize, seed: u64) -> Result<Case> {
    let (net, mut store) = Network::init(model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let biases: Vec<ParamId> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in biases {
        let jitter = Tensor::rand_uniform(store.value(id).shape(), -0.05, 0.05, &mut rng);
        *store.value_mut(id) = jitter;
    }
    let scene = SyntheticScene::generate(seed, lr_h * model.scale, lr_w * model.scale, 2, Texture::FilteredNoise, model.scale)?;
    let left = store.add("input.left", scene.lr[0].clone())?;
    let right = store.add("input.right", scene.lr[1].clone())?;
    let hr = scene.hr.clone();
    let loss = loss.clone();
    Ok(Case {
        name: "network_total_loss",
        store,
        f: Box::new(move |g| {
            let trace = net.forward(g, [g.param(left), g.param(right)])?;
            let lr = [g.param(left), g.param(right)];
            let hr = [g.constant(hr[0].clone()), g.constant(hr[1].clone())];
            Ok(total_loss(g, &trace, lr, hr, &loss)?.total)
        }),
    })
}

/// Runs every case; `max_entries` in `cfg` bounds the cost of the network case.
pub fn run_suite(cases: Vec<Case>, cfg: &GradCheckConfig, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .into_iter()
        .map(|c| Ok((c.name, check(&c.store, &c.f, cfg, &mut rng)?)))
        .collect()
}
