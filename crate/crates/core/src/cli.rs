//! Command-line entry points: `synth`, `train`, `eval`, `check` and `fit`.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical
//! failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bodymodel::{Joints2D, Skeleton};
use crate::checkpoint::Checkpoint;
use crate::diff::finite_diff_check;
use crate::error::{Error, Result};
use crate::eval::{crop_sample, evaluate, fit_with_prior, EvalConfig, FitConfig};
use crate::liegroup::{exp_so3, log_so3, random_rotation, Rotation};
use crate::posedist::{ModelConfig, PartDensity, PoseDistribution, PoseHead, PoseShapeModel, SampleNoise};
use crate::so3density::so3_log_prob;
use crate::train::{synth_dataset, train_loop, write_curve_row, BatchLoss, SynthConfig, SyntheticSample, TrainConfig, CURVE_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "so3pose", version, about = "Probabilistic body pose and shape from 2D keypoints")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; sections not given take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `train.train.epochs=3`.
    #[arg(long = "set", value_name = "PATH=JSON", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Reduce parallel gradients in a fixed order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, env = "SO3POSE_OUT", default_value = "so3pose-out")]
    pub out: PathBuf,
    /// Skeleton fixture; the built-in one when absent.
    #[arg(long, global = true)]
    pub skeleton: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model and write a checkpoint and a loss curve.
    Train,
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Crop side as a fraction of the image, e.g. 0.5.
        #[arg(long)]
        crop: Option<f64>,
    },
    /// Run the property checks on a checkpoint or a fresh model.
    Check {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Refine a point estimate against observed keypoints.
    Fit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keypoints as a `Joints2D` document or a dataset file.
        #[arg(long)]
        obs: PathBuf,
        /// Dataset entry when `--obs` is a dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub fit: FitConfig,
    pub check: CheckSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub config: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 1000,
            config: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training set; synthesised from `train.synth` when absent.
    pub dataset: Option<PathBuf>,
    /// Checkpoint with optimiser state to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            dataset: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: EvalConfig,
    pub crop_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub roundtrips: usize,
    pub normalisation_samples: usize,
    pub normalisation_tol: f64,
    pub fd_coords: usize,
    pub fd_tol: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            roundtrips: 10_000,
            normalisation_samples: 50_000,
            normalisation_tol: 0.05,
            fd_coords: 50,
            fd_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Refined pose and shape as written by `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFit {
    pub rots: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub diverged: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::OutsideSupport { .. } | Error::InvalidSpline(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Applies `a.b.c=value` overrides to a JSON document. Values that do not
/// parse as JSON are taken as strings.
pub fn apply_overrides(mut doc: Value, overrides: &[String]) -> Result<Value> {
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not PATH=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut doc;
        for key in path.split('.') {
            if !cur.is_object() {
                return Err(Error::Config(format!("`{path}` descends into a non-object")));
            }
            cur = cur
                .as_object_mut()
                .expect("checked")
                .entry(key)
                .or_insert_with(|| Value::Object(Default::default()));
        }
        *cur = value;
    }
    Ok(doc)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the config file, then `--set` overrides. Keys not in the
/// schema are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = path {
        merge(&mut doc, serde_json::from_str(&std::fs::read_to_string(p)?)?);
    }
    let doc = apply_overrides(doc, overrides)?;
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

fn read_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    let data: Vec<SyntheticSample> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if data.is_empty() {
        return Err(Error::Validation(format!("{} holds no samples", path.display())));
    }
    Ok(data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(c.config.as_deref(), &c.overrides)?;
    let skeleton = match &c.skeleton {
        Some(p) => Skeleton::load(p)?,
        None => Skeleton::default_fixture(),
    };
    std::fs::create_dir_all(&c.out)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg.synth, c.seed.unwrap_or(0), &skeleton, &c.out),
        Command::Train => cmd_train(&cfg.train, c, &skeleton),
        Command::Eval { checkpoint, dataset, crop } => {
            let mut e = cfg.eval.clone();
            if crop.is_some() {
                e.crop_alpha = *crop;
            }
            if let Some(s) = c.seed {
                e.metrics.seed = s;
            }
            cmd_eval(&e, checkpoint, dataset, &skeleton, &c.out)
        }
        Command::Check { checkpoint } => cmd_check(&cfg, checkpoint.as_deref(), c.seed.unwrap_or(0), &skeleton, &c.out),
        Command::Fit { checkpoint, obs, index } => cmd_fit(&cfg.fit, checkpoint, obs, *index, &skeleton, &c.out),
    }
}

pub fn cmd_synth(s: &SynthSection, seed: u64, skeleton: &Skeleton, out: &Path) -> Result<i32> {
    let data = synth_dataset(s.n, &s.config, skeleton, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let path = out.join("dataset.json");
    write_json(&path, &data)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(EXIT_OK)
}

pub fn cmd_train(t: &TrainSection, c: &Common, skeleton: &Skeleton) -> Result<i32> {
    let mut cfg = t.train.clone();
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= c.deterministic;
    cfg.validate()?;
    let (model, state) = match &t.resume {
        Some(p) => {
            let ck = Checkpoint::load(p, skeleton)?;
            if ck.model.config != t.model {
                return Err(Error::Config("resumed checkpoint has a different model config".into()));
            }
            (ck.model, ck.state)
        }
        None => (PoseShapeModel::new(t.model.clone(), skeleton.clone(), cfg.seed)?, None),
    };
    let data = match &t.dataset {
        Some(p) => read_dataset(p)?,
        None => synth_dataset(cfg.train_size, &cfg.synth, skeleton, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let curve_path = c.out.join("loss.csv");
    let mut curve = BufWriter::new(File::create(&curve_path)?);
    writeln!(curve, "{CURVE_HEADER}")?;
    let mut io_err = None;
    let outcome = train_loop(model, &data, &cfg, state, |r| {
        println!(
            "epoch {:>4}  loss {:.6}  nll {:.4}  glob {:.4}  2d {:.2}",
            r.epoch, r.loss.total, r.loss.nll, r.loss.glob, r.loss.kp2d
        );
        if let Err(e) = write_curve_row(&mut curve, r).and_then(|_| curve.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ck = Checkpoint {
        model: outcome.model,
        seed: cfg.seed,
        state: Some(outcome.state),
    };
    let path = c.out.join("model.ckpt");
    ck.save(&path)?;
    match outcome.aborted {
        Some(e) => {
            eprintln!("training aborted: {e}; last good state saved to {}", path.display());
            Ok(exit_code(&e))
        }
        None => {
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
    }
}

pub fn cmd_eval(e: &EvalSection, checkpoint: &Path, dataset: &Path, skeleton: &Skeleton, out: &Path) -> Result<i32> {
    let model = Checkpoint::load(checkpoint, skeleton)?.model;
    let mut data = read_dataset(dataset)?;
    if let Some(a) = e.crop_alpha {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Config(format!("crop fraction must be in (0, 1], got {a}")));
        }
        data = data.iter().map(|s| crop_sample(s, skeleton, a)).collect();
    }
    let report = evaluate(&model, &data, &e.metrics)?;
    write_json(&out.join("metrics.json"), &report)?;
    let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
    report.write_csv(&mut w)?;
    let mut w = BufWriter::new(File::create(out.join("min_sample.csv"))?);
    report.write_curve_csv(&mut w)?;
    println!(
        "MPJPE {:.1} mm  MPJPE-PA {:.1} mm  min-sample decrease {:.1}%",
        report.mpjpe_point, report.mpjpe_pa_point, report.min_sample.mpjpe_pa_decrease_pct
    );
    Ok(EXIT_OK)
}

/// Roundtrips, Haar normalisation of the first part's flow, a finite
/// difference check of the training loss and a checkpoint roundtrip.
pub fn run_checks(model: &PoseShapeModel, cfg: &CheckSection, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..cfg.roundtrips {
        let r = random_rotation(&mut rng);
        let back = exp_so3(&log_so3(&r));
        worst = worst.max((back.matrix() - r.matrix()).abs().max());
    }
    out.push(CheckResult {
        name: "exp_log_roundtrip".into(),
        passed: worst < 1e-9,
        detail: format!("max abs error {worst:e} over {} rotations", cfg.roundtrips),
    });

    let data = synth_dataset(2, &SynthConfig::default(), &model.skeleton, &mut rng)?;
    if let PoseHead::Autoregressive { parts, .. } = &model.pose {
        if let PartDensity::Flow(flow) = &parts[0] {
            let cond = model.condition(&data[0].obs);
            let beta = cond.beta_mean.clone();
            let ctx = model.context(1, &cond, &beta, &[])?;
            let n = cfg.normalisation_samples.max(1);
            let mean = (0..n)
                .map(|_| so3_log_prob(&random_rotation(&mut rng), &ctx, flow, &model.params).exp())
                .sum::<f64>()
                / n as f64;
            out.push(CheckResult {
                name: "haar_normalisation".into(),
                passed: (mean - 1.0).abs() < cfg.normalisation_tol,
                detail: format!("Haar mean density {mean:.4} over {n} draws"),
            });
        }
    }

    let refs: Vec<&SyntheticSample> = data.iter().collect();
    let noise: Vec<Vec<SampleNoise>> = (0..2).map(|_| vec![SampleNoise::draw(&mut rng)]).collect();
    let weights = Default::default();
    let loss = BatchLoss::new(model, &refs, &[0, 1], &noise, &weights);
    let rep = finite_diff_check(&loss, &model.params, cfg.fd_coords, 1e-5, cfg.fd_tol, &mut rng)?;
    out.push(CheckResult {
        name: "gradient_fd".into(),
        passed: rep.passed,
        detail: format!("max relative error {:e} at {} over {} coordinates", rep.max_rel_err, rep.worst.as_deref().unwrap_or("-"), rep.checks.len()),
    });

    let ck = Checkpoint {
        model: model.clone(),
        seed,
        state: None,
    };
    let bytes = ck.to_bytes()?;
    let same = Checkpoint::from_bytes(&bytes, &model.skeleton)?.to_bytes()? == bytes;
    out.push(CheckResult {
        name: "checkpoint_roundtrip".into(),
        passed: same,
        detail: format!("{} bytes", bytes.len()),
    });
    Ok(out)
}

pub fn cmd_check(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64, skeleton: &Skeleton, out: &Path) -> Result<i32> {
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p, skeleton)?.model,
        None => PoseShapeModel::new(cfg.train.model.clone(), skeleton.clone(), seed)?,
    };
    let results = run_checks(&model, &cfg.check, seed)?;
    for r in &results {
        println!("{} {}: {}", if r.passed { "pass" } else { "FAIL" }, r.name, r.detail);
    }
    write_json(&out.join("check.json"), &results)?;
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_VALIDATION
    })
}

pub fn read_observation(path: &Path, index: usize) -> Result<Joints2D> {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.is_array() {
        let data: Vec<SyntheticSample> = serde_json::from_value(doc)?;
        let n = data.len();
        return data
            .into_iter()
            .nth(index)
            .map(|s| s.obs)
            .ok_or_else(|| Error::Validation(format!("index {index} out of range for {n} samples")));
    }
    let obs: Joints2D = serde_json::from_value(doc)?;
    if obs.points.len() != obs.visible.len() {
        return Err(Error::Validation("points and visibility differ in length".into()));
    }
    Ok(obs)
}

pub fn cmd_fit(f: &FitConfig, checkpoint: &Path, obs: &Path, index: usize, skeleton: &Skeleton, out: &Path) -> Result<i32> {
    let model = Checkpoint::load(checkpoint, skeleton)?.model;
    let obs = read_observation(obs, index)?;
    if obs.points.len() != model.skeleton.tree.len() {
        return Err(Error::Validation(format!(
            "expected {} keypoints, got {}",
            model.skeleton.tree.len(),
            obs.points.len()
        )));
    }
    let r = fit_with_prior(&model, &obs, None, f)?;
    let mut w = BufWriter::new(File::create(out.join("trace.csv"))?);
    writeln!(w, "step,objective")?;
    for (i, e) in r.trace.iter().enumerate() {
        writeln!(w, "{i},{e}")?;
    }
    w.flush()?;
    write_json(
        &out.join("fit.json"),
        &PoseFit {
            rots: r.rots,
            beta: r.beta,
            diverged: r.diverged,
        },
    )?;
    if r.diverged {
        eprintln!("fit diverged; the initialisation was kept");
        return Ok(EXIT_NUMERICAL);
    }
    println!(
        "objective {:.4} -> {:.4} in {} steps",
        r.trace[0],
        r.trace[r.trace.len() - 1],
        r.trace.len() - 1
    );
    Ok(EXIT_OK)
}
