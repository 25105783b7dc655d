//! Config-driven experiments: baseline and proposed runs over seeds and
//! sweep points, written as one JSON document per run plus aggregated
//! tables.
//!
//! ## Config schema (version 1)
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "blobs4",
//!   "dataset": {"synthetic": {"spec": {"counts": [600, 150, 150, 100],
//!                "dimension": 16, "separation": 2.5}, "seed": 0}},
//!   "split": {"train": 0.7, "validation": 0.1, "test": 0.2, "labeled_fraction": 0.1},
//!   "seeds": [1, 2, 3, 4, 5],
//!   "mode": "proposed-ssl",
//!   "train": {"ensemble_size": 3, "threshold": 0.95},
//!   "sweep": {"threshold": [0.1, 0.95]},
//!   "output": "results/blobs4"
//! }
//! ```
//!
//! `dataset` is one of `synthetic`, `raster-synthetic` (both `{spec, seed}`)
//! or `manifest` (a dataset file path, relative to the config file).
//! `split.seed` is ignored: every run uses its own seed for the split, the
//! label mask and training. Sweep axes are `threshold`, `ensemble_size`,
//! `lambda`, `labeled_fraction` and `temperature`; their cartesian product
//! is run when sweeping.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{aggregate, mean_se, report, write_tables, ReportOutcome, SummaryRow};

use crate::data::{
    generate_synthetic, generate_synthetic_raster, load_dataset, mask_labels, stratified_split, Dataset,
    RasterSyntheticSpec, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::metrics::MetricsReport;
use crate::trainer::{evaluate, run_ssl, AuditEntry, IterationRecord, SslOutcome, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
    RasterSynthetic {
        spec: RasterSyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
    Manifest {
        path: PathBuf,
    },
}

impl DatasetSource {
    /// Materializes the dataset; manifest paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { spec, seed } => generate_synthetic(spec, *seed),
            DatasetSource::RasterSynthetic { spec, seed } => generate_synthetic_raster(spec, *seed),
            DatasetSource::Manifest { path } => load_dataset(base.join(path)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// A single model trained on the labeled part only.
    BaselineFsl,
    /// Ensemble self-training with distillation, plus a paired single
    /// model trained the same way with `K = 1`.
    ProposedSsl,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub threshold: Vec<f64>,
    pub ensemble_size: Vec<usize>,
    pub lambda: Vec<f64>,
    pub labeled_fraction: Vec<f64>,
    pub temperature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "ExperimentConfig::default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    pub mode: RunMode,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default = "ExperimentConfig::default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    fn default_name() -> String {
        "experiment".into()
    }

    fn default_output() -> PathBuf {
        PathBuf::from("results")
    }

    /// Parses and validates a config. Syntax errors are parse errors;
    /// schema violations are config errors naming the offending field.
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                source,
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{source}: field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed required".into()));
        }
        self.split
            .validate()
            .map_err(|e| Error::Config(format!("split: {e}")))?;
        self.train
            .validate(0)
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let s = &self.sweep;
        if s.threshold
            .iter()
            .chain(&s.lambda)
            .chain(&s.labeled_fraction)
            .chain(&s.temperature)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("sweep: axis values must be finite".into()));
        }
        for p in self.points(true) {
            self.train_config(&p, 0)
                .validate(0)
                .map_err(|e| Error::Config(format!("sweep: {e}")))?;
            if !(p.labeled_fraction > 0.0 && p.labeled_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "sweep.labeled_fraction: {} not in (0, 1]",
                    p.labeled_fraction
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Grid points in axis order (τ, K, λ, p, T varying slowest to fastest),
    /// or only the base point when `sweep` is false.
    pub fn points(&self, sweep: bool) -> Vec<SweepPoint> {
        let base = SweepPoint {
            threshold: self.train.threshold,
            ensemble_size: self.train.ensemble_size,
            lambda: self.train.lambda,
            labeled_fraction: self.split.labeled_fraction,
            temperature: self.train.temperature,
        };
        if !sweep {
            return vec![base];
        }
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let ks = if self.sweep.ensemble_size.is_empty() {
            vec![base.ensemble_size]
        } else {
            self.sweep.ensemble_size.clone()
        };
        let mut out = Vec::new();
        for &threshold in &or(&self.sweep.threshold, base.threshold) {
            for &ensemble_size in &ks {
                for &lambda in &or(&self.sweep.lambda, base.lambda) {
                    for &labeled_fraction in &or(&self.sweep.labeled_fraction, base.labeled_fraction) {
                        for &temperature in &or(&self.sweep.temperature, base.temperature) {
                            out.push(SweepPoint {
                                threshold,
                                ensemble_size,
                                lambda,
                                labeled_fraction,
                                temperature,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn train_config(&self, p: &SweepPoint, seed: u64) -> TrainConfig {
        TrainConfig {
            threshold: p.threshold,
            ensemble_size: p.ensemble_size,
            lambda: p.lambda,
            temperature: p.temperature,
            seed,
            ..self.train.clone()
        }
    }
}

/// The hyperparameters that vary across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub ensemble_size: usize,
    pub lambda: f64,
    pub labeled_fraction: f64,
    pub temperature: f64,
}

impl SweepPoint {
    fn stem(&self, mode: RunMode, seed: u64) -> String {
        let m = match mode {
            RunMode::BaselineFsl => "baseline",
            RunMode::ProposedSsl => "proposed",
        };
        format!(
            "{m}-p{}-k{}-lambda{}-t{}-tau{}-seed{seed}",
            self.labeled_fraction, self.ensemble_size, self.lambda, self.temperature, self.threshold
        )
    }
}

/// Metric means over the members of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub bacc: f64,
    pub acc: f64,
    pub acc_star: f64,
    pub macro_f1: f64,
}

impl MeanMetrics {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            bacc: mean(|r| r.bacc),
            acc: mean(|r| r.acc),
            acc_star: mean(|r| r.acc_star),
            macro_f1: mean(|r| r.macro_f1),
        }
    }
}

/// Test-split results of one trained model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub ensemble: MetricsReport,
    pub members: Vec<MetricsReport>,
    pub member_mean: MeanMetrics,
    /// Iteration whose snapshot was evaluated (best validation BAcc).
    pub selected_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub history: Vec<IterationRecord>,
    pub audit: Vec<AuditEntry>,
}

/// Everything recorded for one (seed, sweep point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub config_hash: String,
    pub mode: RunMode,
    pub seed: u64,
    pub point: SweepPoint,
    /// Baseline: the single model. Proposed: the `K`-member ensemble.
    pub primary: TestResults,
    /// Proposed only: the paired `K = 1` model.
    pub single: Option<TestResults>,
    pub trace: TrainingTrace,
    pub single_trace: Option<TrainingTrace>,
}

/// Wall-clock of one run, kept apart from the (deterministic) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seconds: f64,
}

fn test_results(outcome: &SslOutcome, test: &[crate::data::Example], mode: ExecMode) -> Result<TestResults> {
    let report = evaluate(outcome.selected(), test, &outcome.policies.eval, mode)?;
    Ok(TestResults {
        member_mean: MeanMetrics::of(&report.members),
        ensemble: report.ensemble,
        members: report.members,
        selected_iteration: outcome.best.as_ref().map(|b| b.iteration),
    })
}

fn trace(outcome: &SslOutcome) -> TrainingTrace {
    TrainingTrace {
        history: outcome.history.clone(),
        audit: outcome.audit.clone(),
    }
}

/// Trains and evaluates one (seed, point) of `cfg` on `data`.
pub fn run_single(cfg: &ExperimentConfig, data: &Dataset, point: &SweepPoint, seed: u64) -> Result<RunResult> {
    let split = SplitSpec {
        labeled_fraction: point.labeled_fraction,
        seed,
        ..cfg.split.clone()
    };
    let (train, val, test) = stratified_split(data, &split)?;
    let pools = mask_labels(&train, data.num_classes, point.labeled_fraction, seed)?;
    let train_cfg = cfg.train_config(point, seed);
    let mode = train_cfg.exec;
    let (primary, single) = match cfg.mode {
        RunMode::BaselineFsl => {
            let single_cfg = TrainConfig {
                ensemble_size: 1,
                ..train_cfg
            };
            let out = run_ssl(&single_cfg, pools.without_unlabeled(), &val)?;
            ((test_results(&out, &test, mode)?, trace(&out)), None)
        }
        RunMode::ProposedSsl => {
            let out = run_ssl(&train_cfg, pools.clone(), &val)?;
            let single_cfg = TrainConfig {
                ensemble_size: 1,
                ..train_cfg.clone()
            };
            let single = run_ssl(&single_cfg, pools, &val)?;
            (
                (test_results(&out, &test, mode)?, trace(&out)),
                Some((test_results(&single, &test, mode)?, trace(&single))),
            )
        }
    };
    let (single, single_trace) = match single {
        Some((r, t)) => (Some(r), Some(t)),
        None => (None, None),
    };
    Ok(RunResult {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        mode: cfg.mode,
        seed,
        point: *point,
        primary: primary.0,
        single,
        trace: primary.1,
        single_trace,
    })
}

/// A run that did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: String,
    pub error: String,
    pub divergence: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub output: PathBuf,
    pub report: Option<ReportOutcome>,
}

/// Runs every (seed, point) and writes `<out>/runs/*.json`,
/// `<out>/runs/*.timing.json` and `<out>/tables/*.csv`. Failed runs are
/// listed in `<out>/failures.json` and do not stop the others.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    sweep: bool,
    mode: ExecMode,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = cfg.dataset.load(base_dir)?;
    let out = if cfg.output.is_absolute() {
        cfg.output.clone()
    } else {
        base_dir.join(&cfg.output)
    };
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut cfg = cfg.clone();
    cfg.train.exec = mode;
    let jobs: Vec<(SweepPoint, u64)> = cfg
        .points(sweep)
        .into_iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    info!("{}: {} run(s)", cfg.name, jobs.len());
    let outcomes = exec::map(mode, &jobs, |_, (point, seed)| {
        let stem = point.stem(cfg.mode, *seed);
        let start = Instant::now();
        let result = run_single(&cfg, &data, point, *seed);
        let seconds = start.elapsed().as_secs_f64();
        (stem, result, seconds)
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (stem, result, seconds) in outcomes {
        match result {
            Ok(r) => {
                fs::write(runs_dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&r)?)?;
                fs::write(
                    runs_dir.join(format!("{stem}.timing.json")),
                    serde_json::to_vec_pretty(&RunTiming { seconds })?,
                )?;
                info!("{stem}: test BAcc {:.4} ({seconds:.1}s)", r.primary.ensemble.bacc);
                results.push(r);
            }
            Err(e) => {
                warn!("{stem} failed: {e}");
                failures.push(RunFailure {
                    run: stem,
                    divergence: matches!(e, Error::Divergence { .. }),
                    error: e.to_string(),
                });
            }
        }
    }
    let failures_path = out.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        fs::write(&failures_path, serde_json::to_vec_pretty(&failures)?)?;
    }
    let report = if results.is_empty() {
        None
    } else {
        Some(write_tables(&results, &out.join("tables"))?)
    };
    Ok(ExperimentOutcome {
        results,
        failures,
        output: out,
        report,
    })
}
