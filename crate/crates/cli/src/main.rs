mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] qta_core::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(qta_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qta", version, about = "Question-type-guided attention: data, training, evaluation, checks")]
struct Cli {
    /// Worker threads for data-parallel work (falls back to QTA_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic routing dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the configured architecture, e.g. CATL-QTA.
        #[arg(long)]
        arch: Option<String>,
        /// Overrides the configured learning rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint; writes eval_report.json (and confusion.json for
    /// models with a type head) into the report directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run a numerical self-check suite.
    Check {
        /// One of sketch, grad, fft, mcb-oracle.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON output path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the per-type, per-source gated feature norms as CSV.
    Norms {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("QTA_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("QTA_THREADS={v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

fn init_threads(n: usize) -> Result<(), CliError> {
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    init_threads(threads)?;
    match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data(config.as_deref(), &out, seed, threads),
        Command::Train {
            config,
            data,
            out,
            epochs,
            arch,
            lr,
        } => commands::train(
            config.as_deref(),
            &data,
            &out,
            commands::TrainOverrides { epochs, arch, lr },
            threads,
        ),
        Command::Eval {
            checkpoint,
            data,
            report,
            split,
        } => commands::eval(&checkpoint, &data, &report, &split),
        Command::Check {
            suite,
            trials,
            eps,
            seed,
            report,
        } => commands::check(&suite, trials, eps, seed, report.as_deref()),
        Command::Norms {
            checkpoint,
            data,
            out,
            split,
        } => commands::norms(&checkpoint, &data, &out, &split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
