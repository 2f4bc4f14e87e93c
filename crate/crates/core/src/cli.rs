//! The `rfpose` command-line interface.
//!
//! Every subcommand writes its machine-readable result as JSON to the given
//! output stream and logs progress to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::check::{model_gradcheck_config, op_checks, tiny_model_gradchecks, CheckLine};
use crate::checkpoint::{self, TrainingMeta};
use crate::config::RunConfig;
use crate::dataset::{atomic_write, read_bytes, read_dataset, write_dataset};
use crate::error::{PoseError, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ParameterCounts};
use crate::sim::generate_scenes;
use crate::train::{
    evaluate, finetune_init, loss_csv, pretrain_ssl, train_supervised, EpochLog, Regime,
    TrainOutcome,
};

#[derive(Debug, Parser)]
#[command(
    name = "rfpose",
    version,
    about = "Multi-person pose estimation from simulated UWB radar"
)]
pub struct Cli {
    /// Worker threads; 1 runs serially. Defaults to one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset.
    Simulate(SimulateArgs),
    /// Train a pose model from scratch.
    Train(TrainArgs),
    /// Self-supervised pretraining of the encoder.
    Pretrain(TrainArgs),
    /// Train a pose model starting from a pretrained encoder.
    Finetune(FinetuneArgs),
    /// Report PCKh of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the raw prediction for one frame.
    Predict(PredictArgs),
    /// Print parameter counts per component.
    Params(ParamsArgs),
    /// Run the gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub max_persons: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise level; overrides the configuration.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Run configuration whose `sim` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration; regime defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated subgroup indices; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub subgroups: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub frame: usize,
    #[arg(long, value_delimiter = ',')]
    pub subgroups: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also check both training losses end to end on a tiny model.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Path of the lowest-loss checkpoint written next to `out`.
pub fn best_path(out: &Path) -> PathBuf {
    suffixed(out, ".best")
}

/// Path of the per-epoch loss CSV written next to `out`.
pub fn losses_path(out: &Path) -> PathBuf {
    suffixed(out, ".losses.csv")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. The JSON result is written to `out` once the
/// command finishes.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.quiet);
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| execute(cli.command, &mut buf));
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        eprintln!("error: {e}");
        return 2;
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    log::set_max_level(level);
}

fn emit<S: Serialize>(out: &mut dyn Write, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    writeln!(out, "{json}").map_err(|e| PoseError::io("<output>", e))
}

fn load_config(path: Option<&Path>, regime: Regime) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, regime),
        None => Ok(RunConfig::defaults(regime)),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a, out),
        Command::Train(a) => train(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Finetune(a) => finetune(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Params(a) => params(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let mut sim = match &a.config {
        Some(p) => RunConfig::load(p, config_regime(p)?)?.sim,
        None => crate::sim::SimConfig::default(),
    };
    if let Some(m) = a.max_persons {
        sim.max_persons = m;
    }
    if let Some(snr) = a.snr_db {
        sim.snr_db = Some(snr);
    }
    sim.validate()?;
    let scenes = generate_scenes(a.seed, a.frames, &sim)?;
    let manifest = write_dataset(&scenes, &sim, &a.out)?;
    log::info!(
        "wrote {} frames to {}",
        manifest.frame_count,
        a.out.display()
    );
    emit(out, &manifest)
}

fn log_epoch(log: &EpochLog) {
    log::info!(
        "epoch {:>4}  lr {:.3e}  loss {:.6}",
        log.epoch,
        log.lr,
        log.loss
    );
}

/// Writes the final and best checkpoints and the loss CSV, then reports the
/// final model on the training data.
fn finish_supervised(
    model: &mut Model<f32>,
    outcome: TrainOutcome,
    cfg: &RunConfig,
    data: &crate::dataset::Dataset,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let meta = |epoch| TrainingMeta {
        regime: cfg.train.regime,
        epoch,
        seed: cfg.train.seed,
        ssl: None,
    };
    checkpoint::save(out_path, model, &meta(outcome.epochs.len()))?;
    checkpoint::save_store(
        &best_path(out_path),
        &model.config,
        &outcome.best,
        &meta(outcome.best_epoch),
    )?;
    atomic_write(&losses_path(out_path), loss_csv(&outcome.epochs).as_bytes())?;
    let mut report: MetricsReport = evaluate(model, data, &model.config.all_subgroups(), 0.5)?;
    report.epoch_losses = outcome.epochs.iter().map(|e| e.loss).collect();
    emit(out, &report)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Regime::Supervised)?;
    let data = read_dataset(&a.data)?;
    let mut model = Model::new_os(cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} frames",
        model.store.total_count(),
        data.len()
    );
    let outcome = train_supervised(
        &mut model,
        &data,
        &cfg.train,
        &cfg.model.all_subgroups(),
        log_epoch,
    )?;
    finish_supervised(&mut model, outcome, &cfg, &data, &a.out, out)
}

#[derive(Serialize)]
struct PretrainReport {
    epochs: usize,
    steps: usize,
    epoch_losses: Vec<f64>,
    masked_counts: Vec<usize>,
    max_target_grad_norm: f64,
}

fn pretrain(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Regime::Pretrain)?;
    let data = read_dataset(&a.data)?;
    let mut model = Model::new_pretrain(cfg.model.clone(), &cfg.ssl, cfg.train.seed)?;
    log::info!(
        "pretraining {} parameters on {} frames",
        model.store.total_count(),
        data.len()
    );
    let outcome = pretrain_ssl(&mut model, &data.frames, &cfg.train, &cfg.ssl, log_epoch)?;
    let meta = TrainingMeta {
        regime: Regime::Pretrain,
        epoch: outcome.epochs.len(),
        seed: cfg.train.seed,
        ssl: Some(cfg.ssl.clone()),
    };
    checkpoint::save(&a.out, &model, &meta)?;
    atomic_write(&losses_path(&a.out), loss_csv(&outcome.epochs).as_bytes())?;
    emit(
        out,
        &PretrainReport {
            epochs: outcome.epochs.len(),
            steps: outcome.steps,
            epoch_losses: outcome.epochs.iter().map(|e| e.loss).collect(),
            masked_counts: outcome.masked_counts,
            max_target_grad_norm: outcome.max_target_grad_norm,
        },
    )
}

fn finetune(a: FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Regime::Finetune)?;
    let data = read_dataset(&a.data)?;
    let init = checkpoint::load(&a.init)?;
    if init.header.training_meta.regime != Regime::Pretrain {
        log::warn!(
            "{} was trained in the '{}' regime; warm-starting from its encoder",
            a.init.display(),
            init.header.training_meta.regime.as_str()
        );
    }
    let mut model = finetune_init(cfg.model.clone(), &init.params, cfg.train.seed)?;
    log::info!(
        "fine-tuning {} parameters on {} frames",
        model.store.total_count(),
        data.len()
    );
    let outcome = train_supervised(
        &mut model,
        &data,
        &cfg.train,
        &cfg.model.all_subgroups(),
        log_epoch,
    )?;
    finish_supervised(&mut model, outcome, &cfg, &data, &a.out, out)
}

fn pose_model(path: &Path) -> Result<Model<f32>> {
    let model = checkpoint::load(path)?.to_model()?;
    if model.pose.is_none() {
        return Err(PoseError::InvalidInput(format!(
            "{} has no pose estimator; fine-tune it first",
            path.display()
        )));
    }
    Ok(model)
}

fn selected(model: &Model<f32>, subgroups: Vec<usize>) -> Vec<usize> {
    if subgroups.is_empty() {
        model.config.all_subgroups()
    } else {
        subgroups
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold.is_finite()) {
        return Err(PoseError::InvalidInput(format!(
            "threshold must be positive, got {}",
            a.threshold
        )));
    }
    let model = pose_model(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let report = evaluate(&model, &data, &selected(&model, a.subgroups), a.threshold)?;
    emit(out, &report)
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let model = pose_model(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let frame = data.frames.get(a.frame).ok_or_else(|| {
        PoseError::InvalidInput(format!(
            "frame {} out of range for {} frames",
            a.frame,
            data.len()
        ))
    })?;
    emit(out, &model.predict(frame, &selected(&model, a.subgroups))?)
}

/// The regime named in a config file, if any, so that any config can be
/// inspected regardless of its regime.
fn config_regime(path: &Path) -> Result<Regime> {
    let bytes = read_bytes(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| PoseError::Config(format!("{}: {e}", path.display())))?;
    match value.get("train").and_then(|t| t.get("regime")) {
        Some(r) => serde_json::from_value(r.clone())
            .map_err(|e| PoseError::Config(format!("{}: {e}", path.display()))),
        None => Ok(Regime::Supervised),
    }
}

#[derive(Serialize)]
struct ParamsReport {
    tokens: usize,
    subgroups: usize,
    #[serde(flatten)]
    counts: ParameterCounts,
}

fn params(a: ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p, config_regime(p)?)?,
        None => RunConfig::defaults(Regime::Supervised),
    };
    let os = Model::<f32>::new_os(cfg.model.clone(), 0)?.parameter_counts();
    let ssl = Model::<f32>::new_pretrain(cfg.model.clone(), &cfg.ssl, 0)?.parameter_counts();
    emit(
        out,
        &ParamsReport {
            tokens: cfg.model.tokens(),
            subgroups: cfg.model.subgroups(),
            counts: ParameterCounts {
                ssl_decoder: ssl.ssl_decoder,
                ..os
            },
        },
    )
}

#[derive(Serialize)]
struct GradcheckOutput {
    passed: bool,
    ops: Vec<CheckLine>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    model: Vec<CheckLine>,
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let ops = op_checks(a.seed);
    let mut model = Vec::new();
    if a.tiny {
        let cfg = model_gradcheck_config(a.seed);
        let (set, recon) = tiny_model_gradchecks(a.seed, &cfg)?;
        model.push(CheckLine::new("set_loss", &set));
        model.push(CheckLine::new("reconstruction_loss", &recon));
    }
    let passed = ops.iter().chain(&model).all(|c| c.passed);
    emit(out, &GradcheckOutput { passed, ops, model })?;
    if passed {
        Ok(())
    } else {
        Err(PoseError::Numerical("gradient check failed".into()))
    }
}
