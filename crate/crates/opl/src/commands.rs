//! Subcommands of the `opl` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use opl_core::autodiff::{grad_check, CheckReport, GradCheckOptions};
use opl_core::model::{BasisMode, Placement};
use opl_core::objectives::{AttributeBatch, Batch, NetworkObjective};
use opl_core::synth::{self, LabeledDataset, SynthSpec, SyntheticData};
use opl_core::train::{self, TrainConfig};
use serde::Serialize;

use crate::analysis::{self, EvalReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::error::{CliError, Result};
use crate::hash::content_hash;
use crate::report::Report;
use crate::sweep::{self, Grid};

#[derive(Debug, Parser)]
#[command(
    name = "opl",
    version,
    about = "Orthogonal projection layers for anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-subspace dataset.
    Datagen(DatagenArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint and compute every metric.
    Eval(EvalArgs),
    /// Probe each slot of a checkpoint for the sensitive attribute.
    Probe(ProbeArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a parameter grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Run configuration; only its `data` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write `train.csv` and `test.csv`.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comparison network for ARD and privacy-per-cost.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Run configuration; only its `metrics` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Include per-row scores in the report.
    #[arg(long)]
    pub scores: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Recompute,
    Direct,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value = "G1O1")]
    pub placement: Placement,
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_face: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_orth: f64,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid such as `k_gopl=2,4;lambda_face=0,1e-3`.
    #[arg(long)]
    pub grid: String,
    /// Dataset directory; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `sweep.csv` and `sweep.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to `OPL_JOBS`, then 1.
    #[arg(long)]
    pub jobs: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => datagen(&a).map(|_| ()),
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Probe(a) => probe(&a).map(|_| ()),
        Command::Gradcheck(a) => gradcheck(&a).map(|_| ()),
        Command::Sweep(a) => sweep_cmd(&a).map(|_| ()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializes")
}

fn emit<T: Serialize>(report: &Report<'_, T>, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => report.write(p),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", report.to_json()).map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

fn pick(ds: &Dataset, split: Split) -> &LabeledDataset {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

/// Writes a dataset directory and returns its manifest.
pub fn datagen(a: &DatagenArgs) -> Result<dataset::DatasetManifest> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let data = synth::generate(&cfg.data)?;
    let diag = synth::verify_planting(&data.train, &data.truth, cfg.metrics.probe)?;
    let manifest = dataset::write_dataset(&a.out, &cfg.data, &data, Some(diag), a.csv)?;
    eprintln!(
        "datagen: {} train / {} test rows, d={}, hash {}",
        manifest.n_train, manifest.n_test, manifest.dim, manifest.content_hash
    );
    Ok(manifest)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub tensor_hash: String,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub initial_orth_defect: f64,
    pub final_orth_defect: Option<f64>,
}

pub fn train_cmd(a: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ds = Dataset::open(&a.data)?;
    let eval = (cfg.train.eval_every > 0).then_some(&ds.test);
    let ck = train::train(&cfg.train, &ds.train, eval)?;
    let manifest = save_checkpoint(&a.out, &ck, Some(ds.manifest.content_hash.clone()))?;
    let last = ck.curve.last();
    let summary = TrainSummary {
        tensor_hash: manifest.tensor_hash.clone(),
        epochs: ck.curve.len(),
        final_loss: last.map(|r| r.loss.total),
        initial_orth_defect: ck.initial_orth_defect,
        final_orth_defect: last.map(|r| r.orth_defect),
    };
    let report = Report::new(
        "train",
        to_value(&cfg.train),
        ds.manifest.content_hash.clone(),
        (&summary, &ck.curve),
    );
    if let Some(p) = &a.report {
        report.write(p)?;
    }
    eprintln!(
        "train: {} epochs, final loss {:?}, checkpoint {}",
        summary.epochs,
        summary.final_loss,
        a.out.display()
    );
    Ok(summary)
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let baseline = a.baseline.as_deref().map(load_checkpoint).transpose()?;
    let ds = Dataset::open(&a.data)?;
    let truth = ds.truth()?;
    let mut result = analysis::evaluate_network(
        &ck.checkpoint.network,
        pick(&ds, a.split),
        truth.as_ref(),
        baseline.as_ref().map(|b| &b.checkpoint.network),
        &cfg.metrics,
    )?;
    if !a.scores {
        result.scores = None;
    }
    let mut parts = vec![
        ck.manifest.tensor_hash.as_bytes(),
        ds.manifest.content_hash.as_bytes(),
    ];
    if let Some(b) = &baseline {
        parts.push(b.manifest.tensor_hash.as_bytes());
    }
    let report = Report::new("eval", to_value(&cfg.metrics), content_hash(parts), &result);
    emit(&report, a.out.as_deref())?;
    eprintln!(
        "eval: auc {:.4} ap {:.4} fpd {:.4} ard {:.4}",
        result.metrics.auc, result.metrics.ap, result.metrics.fpd, result.metrics.ard
    );
    Ok(result)
}

pub fn probe(a: &ProbeArgs) -> Result<analysis::ProbeReport> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let result = analysis::probe_network(&ck.checkpoint.network, pick(&ds, a.split), &cfg.metrics)?;
    let hash = content_hash([
        ck.manifest.tensor_hash.as_bytes(),
        ds.manifest.content_hash.as_bytes(),
    ]);
    emit(
        &Report::new("probe", to_value(&cfg.metrics), hash, &result),
        a.out.as_deref(),
    )?;
    eprintln!(
        "probe: fpd {:.4} raw {:.4}",
        result.fpd, result.raw_accuracy
    );
    Ok(result)
}

#[derive(Debug, Serialize)]
pub struct GradcheckResult {
    pub mode: BasisMode,
    pub report: CheckReport,
}

/// Checks both losses terms on a small planted problem. Fails with a
/// numerical error when any mode exceeds the tolerance.
pub fn gradcheck(a: &GradcheckArgs) -> Result<Vec<GradcheckResult>> {
    let spec = SynthSpec {
        d: a.d,
        t: a.t,
        s: a.s,
        n_train: a.n,
        n_test: a.n,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let data = synth::generate(&spec)?;
    let modes: &[BasisMode] = match a.mode {
        ModeChoice::Recompute => &[BasisMode::RecomputeQr],
        ModeChoice::Direct => &[BasisMode::DirectQ],
        ModeChoice::Both => &[BasisMode::RecomputeQr, BasisMode::DirectQ],
    };
    let batch = Batch {
        features: data.train.features.clone(),
        labels: data.train.labels.clone(),
        attributes: vec![AttributeBatch {
            embeddings: data.train.attributes.clone(),
            mask: data.train.presence.clone(),
        }],
    };
    let mut results = Vec::new();
    for &mode in modes {
        let cfg = TrainConfig {
            placement: a.placement,
            k_gopl: Some(a.k),
            k_opl: Some(a.k),
            lambda_face: a.lambda_face,
            lambda_orth: a.lambda_orth,
            mode,
            seed: a.seed,
            ..TrainConfig::default()
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let net = train::initial_network(&cfg, a.d)?;
        let objective = NetworkObjective {
            network: &net,
            batch: &batch,
            weights: cfg.weights(),
        };
        let report = grad_check(&objective, &net.params(), GradCheckOptions::default())?;
        eprintln!(
            "gradcheck {:?}: max rel error {:.3e} over {} entries: {}",
            mode,
            report.max_rel_error,
            report.entries_checked,
            if report.pass { "PASS" } else { "FAIL" }
        );
        results.push(GradcheckResult { mode, report });
    }
    let report = Report::new(
        "gradcheck",
        to_value(&(&spec, a.k, a.placement)),
        String::new(),
        &results,
    );
    emit(&report, a.out.as_deref())?;
    if let Some(worst) = results
        .iter()
        .filter(|r| !r.report.pass)
        .map(|r| r.report.max_rel_error)
        .reduce(f64::max)
    {
        return Err(opl_core::Error::GradientCheck {
            max_rel_error: worst,
        }
        .into());
    }
    Ok(results)
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<Vec<sweep::SweepRow>> {
    let cfg = load_config(a.config.as_deref())?;
    let grid: Grid = a.grid.parse()?;
    let jobs = sweep::resolve_jobs(a.jobs)?;
    let (data, input_hash) = match &a.data {
        Some(dir) => {
            let ds = Dataset::open(dir)?;
            let truth = ds.truth()?.ok_or_else(|| {
                CliError::Runtime(format!(
                    "{}: sweep needs the planted sidecar",
                    dir.display()
                ))
            })?;
            let hash = ds.manifest.content_hash.clone();
            (
                SyntheticData {
                    train: ds.train,
                    test: ds.test,
                    truth,
                },
                hash,
            )
        }
        None => (synth::generate(&cfg.data)?, String::new()),
    };
    let rows = sweep::run_sweep(&cfg, &grid, &data, jobs);
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    sweep::write_csv(&a.out.join("sweep.csv"), &grid, &rows)?;
    Report::new("sweep", to_value(&(&cfg, &a.grid)), input_hash, &rows)
        .write(&a.out.join("sweep.json"))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "sweep: {} cells, {} failed, jobs {}",
        rows.len(),
        failed,
        jobs
    );
    Ok(rows)
}
