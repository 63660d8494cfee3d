use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use osaka_cli::config::{ConfigError, ExperimentConfig};
use osaka_cli::{report, runner, search};

/// Continual-learning stream harness: meta pre-training, online episodes,
/// random hyperparameter search, and reporting.
#[derive(Parser)]
#[command(name = "osaka", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train an initialization and write the checkpoint.
    Pretrain {
        #[arg(short, long)]
        config: PathBuf,
        /// Use the first-order meta-gradient approximation.
        #[arg(long)]
        first_order: bool,
        /// Use exact second-order meta-gradients.
        #[arg(long, conflicts_with = "first_order")]
        second_order: bool,
        /// Checkpoint path override.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one episode per (learner, seed) and write traces + summaries.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Stationarity override for the stream profile (e.g. 0.98 or 0.90).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Random hyperparameter search over the configured grid.
    Search {
        #[arg(short, long)]
        config: PathBuf,
        /// Trials to run (overrides the config's budget).
        #[arg(long)]
        budget: Option<usize>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Stationarity override for the stream profile.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Summarize a run directory: table, accuracy curves, PR scatter.
    Report {
        /// Run directory holding trace_*.csv and summary_*.json files.
        dir: PathBuf,
        /// Smoothing window for the accuracy curves.
        #[arg(long, default_value_t = 100)]
        smooth: usize,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            first_order,
            second_order,
            output,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let fo = if first_order {
                Some(true)
            } else if second_order {
                Some(false)
            } else {
                None
            };
            runner::cmd_pretrain(&cfg, fo, output)
        }
        Command::Run {
            config,
            jobs,
            alpha,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_alpha(&mut cfg, alpha)?;
            runner::cmd_run(&cfg, jobs)
        }
        Command::Search {
            config,
            budget,
            jobs,
            alpha,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_alpha(&mut cfg, alpha)?;
            search::cmd_search(&cfg, budget, jobs)
        }
        Command::Report { dir, smooth } => report::cmd_report(&dir, smooth),
    }
}

fn apply_alpha(cfg: &mut ExperimentConfig, alpha: Option<f64>) -> anyhow::Result<()> {
    if let Some(a) = alpha {
        cfg.stream.alpha = a;
        cfg.validate()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are configuration errors.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
