//! `iosmc` command-line front end: train, evaluate and simulate design
//! policies.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Metric;
use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "iosmc",
    version,
    about = "Amortized sequential experimental design with inside-out SMC²"
)]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the reproducibility reference.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: $IOSMC_OUTPUT_DIR, then ./runs).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy by Markovian score climbing.
    Train {
        /// Continue from the training state in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a policy checkpoint (or `random`).
    Eval {
        #[arg(long, default_value = "random")]
        checkpoint: String,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Report path (default: <output_dir>/eval_<metric>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Roll out a policy checkpoint (or `random`) and dump trajectories.
    Simulate {
        #[arg(long, default_value = "random")]
        checkpoint: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Fixed parameter vector, comma separated; sampled from the prior
        /// when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let resolve = |o: &Overrides| RunConfig::resolve(cli.config.as_deref(), o, cli.seed, cli.output_dir.as_deref());
    match &cli.command {
        Command::Train { resume, overrides } => {
            let cfg = resolve(overrides)?;
            let path = commands::train(&cfg, *resume)?;
            println!("{}", path.display());
        }
        Command::Eval {
            checkpoint,
            metric,
            out,
            overrides,
        } => {
            let cfg = resolve(overrides)?;
            let path = commands::eval(&cfg, checkpoint, *metric, out.clone())?;
            println!("{}", path.display());
        }
        Command::Simulate {
            checkpoint,
            count,
            theta,
            overrides,
        } => {
            let cfg = resolve(overrides)?;
            for p in commands::simulate(&cfg, checkpoint, *count, theta.clone())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
