use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use kdssl::data::save_dataset;
use kdssl::experiment::{report, run_experiment, DatasetSource, ExperimentConfig, ExperimentOutcome};
use kdssl::{exec, Error, ExecMode};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "kdssl", version, about = "Ensemble self-training with online distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the config's base point for every seed.
    Run(RunArgs),
    /// Run the cartesian product of the config's sweep axes.
    Sweep(RunArgs),
    /// Rebuild the tables of a result directory.
    Report { dir: PathBuf },
    /// Generate a dataset file from a dataset source document.
    GenData {
        /// JSON such as `{"synthetic": {"spec": {...}, "seed": 0}}`.
        spec: PathBuf,
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Validation(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn experiment(args: &RunArgs, sweep: bool, mode: ExecMode) -> kdssl::Result<u8> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let base = base_dir(&args.config);
    if let Some(out) = &args.out {
        // A command-line path is relative to the working directory.
        cfg.output = std::path::absolute(out)?;
    }
    let ExperimentOutcome {
        results,
        failures,
        output,
        ..
    } = run_experiment(&cfg, &base, sweep, mode)?;
    info!("{} run(s) written to {}", results.len(), output.display());
    if failures.is_empty() {
        return Ok(0);
    }
    for f in &failures {
        error!("{}: {}", f.run, f.error);
    }
    Ok(if failures.iter().any(|f| f.divergence) {
        EXIT_DIVERGENCE
    } else {
        EXIT_PARTIAL
    })
}

fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> kdssl::Result<u8> {
    let text = fs::read_to_string(spec)?;
    let mut source: DatasetSource =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        match &mut source {
            DatasetSource::Synthetic { seed, .. } | DatasetSource::RasterSynthetic { seed, .. } => *seed = s,
            DatasetSource::Manifest { .. } => warn!("--seed has no effect on a manifest source"),
        }
    }
    let data = source.load(&base_dir(spec))?;
    save_dataset(&data, out)?;
    info!(
        "wrote {} examples ({} classes) to {}",
        data.len(),
        data.num_classes,
        out.display()
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();

    let mode = match cli.threads.map(exec::configure_threads).transpose() {
        Ok(m) => m.unwrap_or_default(),
        Err(e) => {
            error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) => experiment(args, false, mode),
        Command::Sweep(args) => experiment(args, true, mode),
        Command::Report { dir } => report(dir).map(|r| {
            for t in &r.tables {
                info!("wrote {}", t.display());
            }
            if r.skipped.is_empty() {
                0
            } else {
                EXIT_PARTIAL
            }
        }),
        Command::GenData { spec, out, seed } => gen_data(spec, out, *seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
