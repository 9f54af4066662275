//! `stereofb` command-line driver.
//!
//! Every subcommand writes under an output root taken from `--out`, then
//! `STEREOFB_OUT`, then `./runs`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stereofb::checkpoint;
use stereofb::config::{ModelConfig, RunConfig};
use stereofb::data::Dataset;
use stereofb::eval::{self, EvalItem, EvalReport};
use stereofb::gradcheck::{network_case, op_cases, run_suite, GradCheckConfig};
use stereofb::io::{read_png, write_pfm, write_png};
use stereofb::network::Network;
use stereofb::synthetic::scene_set;
use stereofb::train::{OutputDir, Trainer};

#[derive(Parser)]
#[command(name = "stereofb", version, about = "Recurrent stereo super-resolution with HR disparity feedback")]
struct Cli {
    /// Output root; defaults to $STEREOFB_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every primitive and of a full recurrent pass.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Entries sampled per parameter tensor of the network case.
        #[arg(long, default_value_t = 4)]
        entries: usize,
        /// Only check the primitives.
        #[arg(long)]
        ops_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes synthetic stereo pairs with ground-truth disparity.
    Synth(SynthArgs),
    /// Trains on a folder of PNG pairs or on synthetic scenes.
    Train(TrainArgs),
    /// Step-wise PSNR/SSIM/EPE report for a checkpoint.
    Eval(EvalArgs),
    /// Super-resolves one stereo pair and writes the HR disparities.
    Infer(InferArgs),
    /// Regenerates the CSV and plot files of an evaluation run from its JSON.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    d_min: usize,
    #[arg(long, default_value_t = 8)]
    d_max: usize,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    /// Folder with `left/` and `right/` PNGs; synthetic scenes when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic scenes.
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Seed of the first synthetic scene.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; missing fields take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop once the batch PSNR reaches this value.
    #[arg(long)]
    target_psnr: Option<f64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Trained weights; freshly initialized ones (seed 0) when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the outputs of every iteration and step.
    #[arg(long)]
    dump_intermediates: bool,
}

fn out_root(cli: Option<PathBuf>) -> PathBuf {
    cli.or_else(|| std::env::var_os("STEREOFB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck(out: &Path, tol: f64, entries: usize, ops_only: bool, seed: u64) -> Result<bool> {
    let ops = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let mut results = run_suite(op_cases(seed), &ops, seed)?;
    if !ops_only {
        let cfg = RunConfig::desk();
        let case = network_case(&cfg.model, &cfg.loss, 8, 12, seed)?;
        results.extend(run_suite(vec![case], &GradCheckConfig::piecewise_smooth(tol, entries), seed)?);
    }
    let mut ok = true;
    for (name, rep) in &results {
        println!("{:<28} {:>10.3e} {}", name, rep.max_rel_err, if rep.passed { "ok" } else { "FAIL" });
        ok &= rep.passed;
    }
    fs::create_dir_all(out)?;
    let summary: Vec<_> = results
        .iter()
        .map(|(n, r)| serde_json::json!({ "case": n, "max_rel_err": r.max_rel_err, "passed": r.passed }))
        .collect();
    write_json(&out.join("gradcheck.json"), &summary)?;
    Ok(ok)
}

fn synth(out: &Path, a: &SynthArgs) -> Result<()> {
    for sub in ["left", "right", "disparity", "noc"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let scenes = scene_set(a.seed, a.count, a.height, a.width, a.d_min, a.d_max, a.scale)?;
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:04}");
        write_png(out.join("left").join(format!("{name}.png")), &s.hr[0])?;
        write_png(out.join("right").join(format!("{name}.png")), &s.hr[1])?;
        write_pfm(out.join("disparity").join(format!("{name}.pfm")), &s.disparity[0])?;
        write_png(out.join("noc").join(format!("{name}.png")), &s.non_occluded[0])?;
    }
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn train_data(d: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    let t = &cfg.train;
    Ok(match &d.data {
        Some(dir) => Dataset::from_folder(dir, cfg.model.scale, t.patch_h, t.patch_w, t.patch_stride)?,
        None => {
            let d_max = (t.patch_w / 4).saturating_sub(1).min(8);
            let scenes = scene_set(d.data_seed, d.scenes, t.patch_h, t.patch_w, 2.min(d_max), d_max, cfg.model.scale)?;
            Dataset::from_scenes(&scenes)
        }
    })
}

fn train(out: &Path, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v as _;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(v) = a.target_psnr {
        cfg.train.target_psnr = Some(v as _);
    }
    cfg.validate()?;
    let data = train_data(&a.data, &cfg)?;
    let dir = OutputDir::create(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&cfg, &data, Some(dir), p)?,
        None => Trainer::new(&cfg, &data, Some(dir))?,
    };
    let outcome = trainer.run(|r| {
        if r.step % 10 == 0 || r.step == 1 {
            eprintln!("step {:>6} epoch {:>4} lr {:.2e} loss {:.5} psnr {:.3}", r.step, r.epoch, r.lr, r.loss.total, r.psnr);
        }
    })?;
    if let Some(last) = outcome.records.last() {
        println!("finished at step {} with psnr {:.3}", last.step, last.psnr);
    }
    Ok(())
}

fn eval_items(d: &DataArgs, model: &ModelConfig) -> Result<(Vec<EvalItem>, Vec<eval::Skipped>)> {
    Ok(match &d.data {
        Some(dir) => eval::load_folder(dir, model.scale)?,
        None => {
            let scenes = scene_set(d.data_seed, d.scenes, 32, 96, 2, 8, model.scale)?;
            let items = scenes.iter().enumerate().map(|(i, s)| EvalItem::from_scene(format!("synthetic_{i:04}"), s)).collect();
            (items, Vec::new())
        }
    })
}

fn evaluate(out: &Path, a: &EvalArgs) -> Result<()> {
    let (state, cfg) = checkpoint::load(&a.checkpoint)?;
    let (net, _) = Network::init(&cfg.model, cfg.train.seed)?;
    let (items, skipped) = eval_items(&a.data, &cfg.model)?;
    for s in &skipped {
        eprintln!("skipped {}: {}", s.name, s.reason);
    }
    if items.is_empty() {
        bail!("no readable evaluation pairs");
    }
    let mut report = eval::evaluate(&net, &state.store, &items)?;
    report.skipped = skipped;
    report.write(out)?;
    for s in &report.summary {
        println!("iteration {} step {}: psnr {:.3}", s.iteration, s.step, s.psnr_pair);
    }
    Ok(())
}

fn infer(out: &Path, a: &InferArgs) -> Result<()> {
    let (net, store) = match &a.checkpoint {
        Some(p) => {
            let (state, cfg) = checkpoint::load(p)?;
            if cfg.model.scale != a.scale {
                bail!("checkpoint was trained for scale {}, not {}", cfg.model.scale, a.scale);
            }
            (Network::init(&cfg.model, cfg.train.seed)?.0, state.store)
        }
        None => {
            eprintln!("no checkpoint given: using untrained weights");
            let model = ModelConfig {
                scale: a.scale,
                ..ModelConfig::default()
            };
            Network::init(&model, 0)?
        }
    };
    let (l, r) = (read_png(&a.left)?, read_png(&a.right)?);
    if l.shape() != r.shape() {
        bail!("left {:?} and right {:?} differ in shape", l.shape(), r.shape());
    }
    net.config().check_input(l.shape()[2], l.shape()[3])?;
    let pred = eval::predict(&net, &store, &[l, r])?;
    fs::create_dir_all(out)?;
    let fin = pred.final_output();
    for (v, name) in ["left", "right"].iter().enumerate() {
        write_png(out.join(format!("sr_{name}.png")), &fin.sr[v])?;
        write_pfm(out.join(format!("disparity_{name}.pfm")), &fin.disparity[v])?;
    }
    if a.dump_intermediates {
        for (t, steps) in pred.iterations.iter().enumerate() {
            for (s, o) in steps.iter().enumerate() {
                for (v, name) in ["left", "right"].iter().enumerate() {
                    let tag = format!("t{}_step{}_{name}", t + 1, s + 1);
                    write_png(out.join(format!("sr_{tag}.png")), &o.sr[v])?;
                    write_pfm(out.join(format!("disparity_{tag}.pfm")), &o.disparity[v])?;
                }
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    let r = EvalReport::read(run)?;
    r.write_derived(run)?;
    print!("{}", r.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let root = out_root(cli.out);
    match cli.cmd {
        Command::Gradcheck {
            tol,
            entries,
            ops_only,
            seed,
        } => gradcheck(&root.join("gradcheck"), tol, entries, ops_only, seed),
        Command::Synth(a) => synth(&root.join("synth"), &a).map(|_| true),
        Command::Train(a) => train(&root.join("train"), &a).map(|_| true),
        Command::Eval(a) => evaluate(&root.join("eval"), &a).map(|_| true),
        Command::Infer(a) => infer(&root.join("infer"), &a).map(|_| true),
        Command::Report { run } => report(&run).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
