//! `ltrlab`: generate synthetic long-tailed features, re-train classifier
//! heads on them, and emit the analysis tables.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{DataArgs, GenArgs, LossArgs, PosthocArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "ltrlab", version, about = "Classifier re-training laboratory for long-tailed recognition")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that writes artifacts.
#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// TOML config with [data], [loss], [train], [posthoc] and [sweep] sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic long-tailed train/test pair.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Train a head; writes a checkpoint, the loss history and a metrics report.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        loss: LossArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        posthoc: PosthocArgs,
    },
    /// Group accuracies of a checkpoint on an evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        posthoc: PosthocArgs,
    },
    /// Logits Magnitude, Regularized Std and weight norms of a checkpoint.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        posthoc: PosthocArgs,
        #[arg(long, default_value_t = ltr_core::metrics::DEFAULT_BIN_WIDTH)]
        bin_width: usize,
        /// Also run the logit perturbation simulation with this ξ std.
        #[arg(long)]
        xi_std: Option<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        perturb_trials: usize,
        /// Use one ξ for all classes instead of independent draws.
        #[arg(long)]
        shared_xi: bool,
    },
    /// Run the numerical self-check suite; exits 1 if any check fails.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override every trial count (marks reduced-confidence checks).
        #[arg(long)]
        trials: Option<usize>,
        /// Test hook: negate the bias Hessian so the convexity check must fail.
        #[arg(long, hide = true)]
        negate_hessian: bool,
    },
    /// LORT smoothing-value sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated δ values in [0, 1).
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Learning-rate x weight-decay grid for one loss.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        loss: LossArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        wds: Option<Vec<f64>>,
    },
    /// Method comparison table with per-method metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated method presets.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// The standard 5-seed two-stage benchmark.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds (default 0,1,2,3,4).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

/// Exit status 2 for usage errors, 1 for failed runs or checks.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(anyhow::Error),
}

impl CliError {
    /// Invalid arguments reported by the core library count as usage errors.
    pub fn from_core(e: ltr_core::Error) -> Self {
        match e {
            ltr_core::Error::InvalidArgument { .. } => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failure(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.into())
    }
}

fn configure_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(e.into()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_jobs(cli.jobs)?;
    match cli.command {
        Command::Gen { common, gen } => commands::gen(&common, &gen),
        Command::Train {
            common,
            data,
            loss,
            train,
            posthoc,
        } => commands::train(&common, &data, &loss, &train, &posthoc),
        Command::Eval {
            common,
            checkpoint,
            data,
            posthoc,
        } => commands::eval(&common, &checkpoint, &data, &posthoc),
        Command::Metrics {
            common,
            checkpoint,
            data,
            posthoc,
            bin_width,
            xi_std,
            perturb_trials,
            shared_xi,
        } => commands::metrics(
            &common,
            &checkpoint,
            &data,
            &posthoc,
            bin_width,
            xi_std.map(|x| (x, perturb_trials, shared_xi)),
        ),
        Command::Verify {
            out,
            seed,
            trials,
            negate_hessian,
        } => commands::verify(out.as_deref(), seed, trials, negate_hessian),
        Command::Sweep {
            common,
            data,
            train,
            deltas,
        } => commands::sweep(&common, &data, &train, deltas),
        Command::Grid {
            common,
            data,
            loss,
            train,
            lrs,
            wds,
        } => commands::grid(&common, &data, &loss, &train, lrs, wds),
        Command::Compare {
            common,
            data,
            train,
            methods,
        } => commands::compare(&common, &data, &train, methods),
        Command::Benchmark { out, seeds } => commands::benchmark(&out, seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
