//! Adam training loop with data-parallel per-sample gradients, checkpoints
//! and a JSON-lines log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::psnr;
use crate::network::Network;
use crate::nn::{ParamId, ParamStore};
use crate::parallel;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction; moments are indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient keep their moments and values.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: Real) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.value_mut(id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: Real,
    /// Mean PSNR of the final outputs on the batch, before the update.
    pub psnr: Real,
    pub loss: LossReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub reached_target: bool,
}

/// Loss, gradients and final-output PSNR of a single sample.
pub struct SampleResult {
    pub grads: Vec<Option<Tensor>>,
    pub report: LossReport,
    pub psnr: Real,
}

pub fn sample_gradients(net: &Network, store: &ParamStore, sample: &Sample, cfg: &RunConfig) -> Result<SampleResult> {
    let g = Graph::with_params(store);
    let lr = [g.constant(sample.lr[0].clone()), g.constant(sample.lr[1].clone())];
    let hr = [g.constant(sample.hr[0].clone()), g.constant(sample.hr[1].clone())];
    let trace = net.forward(&g, lr)?;
    let loss = total_loss(&g, &trace, lr, hr, &cfg.loss)?;
    let out = trace.output();
    let mut p = 0.0;
    for v in 0..2 {
        let sr = g.value(out[v]).map(|x| x.clamp(0.0, 1.0));
        p += psnr(&sr, &sample.hr[v], 100.0)? / 2.0;
    }
    let grads_all = g.backward(loss.total)?;
    let grads = store.ids().map(|id| grads_all.param(id)).collect();
    Ok(SampleResult {
        grads,
        report: loss.report,
        psnr: p,
    })
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as Real;
    let mut r = LossReport::default();
    for x in reports {
        r.total += x.total / n;
        r.sr += x.sr / n;
        r.bipam += x.bipam / n;
        r.disp += x.disp / n;
        r.bipam_terms.photo += x.bipam_terms.photo / n;
        r.bipam_terms.cycle += x.bipam_terms.cycle / n;
        r.bipam_terms.smooth += x.bipam_terms.smooth / n;
        r.bipam_terms.cons += x.bipam_terms.cons / n;
        r.disp_terms.rc += x.disp_terms.rc / n;
        r.disp_terms.cycle_hr += x.disp_terms.cycle_hr / n;
        r.disp_terms.cons_hr += x.disp_terms.cons_hr / n;
        r.disp_terms.smooth += x.disp_terms.smooth / n;
        r.empty_masks += x.empty_masks;
    }
    r
}

/// Per-sample gradients computed in parallel and averaged in sample order,
/// so the result does not depend on scheduling.
pub fn batch_gradients(
    net: &Network,
    store: &ParamStore,
    batch: &[&Sample],
    cfg: &RunConfig,
) -> Result<(Vec<Option<Tensor>>, LossReport, Real)> {
    let results = parallel::map(batch, |s| sample_gradients(net, store, s, cfg));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len() as Real;
    let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.add_assign(g),
                None => *acc = Some(g.clone()),
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    let reports: Vec<LossReport> = results.iter().map(|r| r.report).collect();
    let psnr = results.iter().map(|r| r.psnr).sum::<Real>() / n;
    Ok((grads, mean_report(&reports), psnr))
}

/// 1-based epoch containing optimizer step `step` (0-based).
pub fn epoch_of(step: usize, batch: usize, dataset_len: usize) -> usize {
    1 + step * batch.min(dataset_len.max(1)) / dataset_len.max(1)
}

/// Where checkpoints and the log go.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let ck = root.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        Ok(OutputDir { root })
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub net: Network,
    pub state: TrainState,
    data: &'a Dataset,
    out: Option<OutputDir>,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters from `cfg.train.seed`.
    pub fn new(cfg: &RunConfig, data: &'a Dataset, out: Option<OutputDir>) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = Network::init(&cfg.model, cfg.train.seed)?;
        let adam = Adam::new(&store, &cfg.train);
        Self::with_state(cfg, data, out, net, TrainState { store, adam, step: 0 })
    }

    /// Continues from a checkpoint.
    pub fn resume(cfg: &RunConfig, data: &'a Dataset, out: Option<OutputDir>, path: &Path) -> Result<Self> {
        let (state, saved) = crate::checkpoint::load(path)?;
        if saved.model != cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run".into()));
        }
        let (net, fresh) = Network::init(&cfg.model, cfg.train.seed)?;
        if fresh.len() != state.store.len() || fresh.ids().any(|id| fresh.name(id) != state.store.name(id)) {
            return Err(Error::Config("checkpoint parameters do not match the network".into()));
        }
        Self::with_state(cfg, data, out, net, state)
    }

    fn with_state(cfg: &RunConfig, data: &'a Dataset, out: Option<OutputDir>, net: Network, state: TrainState) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            state,
            data,
            out,
        })
    }

    /// Runs one optimizer step and returns its record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let t = &self.cfg.train;
        let step = self.state.step;
        let idx = self.data.batch_indices(t.batch_size, t.seed, step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.data.samples[i]).collect();
        let epoch = epoch_of(step, t.batch_size, self.data.len());
        let lr = t.lr_at_epoch(epoch);
        let (grads, report, psnr) = batch_gradients(&self.net, &self.state.store, &batch, &self.cfg)?;
        let finite = report.total.is_finite() && grads.iter().flatten().all(|g| g.all_finite());
        if !finite {
            if let Some(out) = &self.out {
                let path = out.root.join("checkpoints").join("last_good.ckpt");
                crate::checkpoint::save(&path, &self.state, &self.cfg)?;
            }
            return Err(Error::NonFiniteLoss { step });
        }
        self.state.adam.step(&mut self.state.store, &grads, lr);
        self.state.step += 1;
        Ok(StepRecord {
            step: self.state.step,
            epoch,
            lr,
            psnr,
            loss: report,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `cfg.train.steps` total steps or the PSNR target.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
        let mut log = match &self.out {
            Some(out) => {
                let p = out.log_path();
                Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                )
            }
            None => None,
        };
        let mut outcome = TrainOutcome::default();
        while self.state.step < self.cfg.train.steps {
            let rec = self.step()?;
            if let Some(f) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(self.out.as_ref().unwrap().log_path(), e))?;
            }
            on_step(&rec);
            let every = self.cfg.train.checkpoint_every;
            if let Some(out) = &self.out {
                if every > 0 && self.state.step % every == 0 {
                    crate::checkpoint::save(&out.checkpoint_path(self.state.step), &self.state, &self.cfg)?;
                }
            }
            let reached = self.cfg.train.target_psnr.is_some_and(|p| rec.psnr >= p);
            outcome.records.push(rec);
            if reached {
                outcome.reached_target = true;
                break;
            }
        }
        if let Some(out) = &self.out {
            crate::checkpoint::save(&out.root.join("checkpoints").join("final.ckpt"), &self.state, &self.cfg)?;
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthetic::scene_set;

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model = ModelConfig {
            channels: 4,
            rdb_blocks: 1,
            rdb_layers: 2,
            rdb_growth: 4,
            cascade: 1,
            hypotheses: 4,
            search_range: 4.0,
            ..ModelConfig::default()
        };
        cfg.train.batch_size = 2;
        cfg.train.steps = 3;
        cfg
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let id = store.add("p", Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, &TrainConfig::default());
        let g = Tensor::new([1, 1, 1, 3], vec![0.5, -2.0, 0.0]).unwrap();
        adam.step(&mut store, &[Some(g)], 0.1);
        let p = store.value(id).data();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let mut store = ParamStore::default();
        let id = store.add("p", Tensor::scalar(0.3)).unwrap();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&store, &cfg);
        let (mut x, mut m, mut v) = (0.3 as Real, 0.0 as Real, 0.0 as Real);
        for t in 1..=5 {
            let gv = 2.0 * x - 1.0;
            adam.step(&mut store, &[Some(Tensor::scalar(gv))], 0.01);
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - (0.9 as Real).powi(t));
            let vh = v / (1.0 - (0.999 as Real).powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(store.value(id).item(), x);
        }
    }

    #[test]
    fn epochs_count_passes_over_the_data() {
        assert_eq!(epoch_of(0, 4, 4), 1);
        assert_eq!(epoch_of(30, 4, 4), 31);
        assert_eq!(epoch_of(29, 4, 400), 1);
        assert_eq!(epoch_of(100, 4, 400), 2);
    }

    #[test]
    fn batch_gradients_average_sample_gradients() {
        let cfg = tiny_run();
        let scenes = scene_set(0, 2, 8, 24, 0, 2, 2).unwrap();
        let data = Dataset::from_scenes(&scenes);
        let (net, store) = Network::init(&cfg.model, 0).unwrap();
        let a = sample_gradients(&net, &store, &data.samples[0], &cfg).unwrap();
        let b = sample_gradients(&net, &store, &data.samples[1], &cfg).unwrap();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let (g, report, _) = batch_gradients(&net, &store, &batch, &cfg).unwrap();
        assert!((report.total - (a.report.total + b.report.total) / 2.0).abs() < 1e-12);
        for i in 0..store.len() {
            let want = a.grads[i].as_ref().unwrap().zip_map(b.grads[i].as_ref().unwrap(), |x, y| (x + y) / 2.0).unwrap();
            assert!(g[i].as_ref().unwrap().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let cfg = tiny_run();
        let scenes = scene_set(1, 2, 8, 24, 0, 2, 2).unwrap();
        let data = Dataset::from_scenes(&scenes);
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path()).unwrap();
        let mut a = Trainer::new(&cfg, &data, Some(out)).unwrap();
        let ra = a.run(|_| {}).unwrap();
        let mut b = Trainer::new(&cfg, &data, None).unwrap();
        let rb = b.run(|_| {}).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(ra.records.len(), 3);
        assert_eq!(ra.records[2].loss, rb.records[2].loss);
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: StepRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
    }
}
