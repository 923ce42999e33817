//! `privicl`: run private in-context learning experiments, account budgets,
//! attack, evaluate, augment and benchmark.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 backend error,
//! 4 privacy budget exhausted, 5 too few attack targets scored.

mod account;
mod attack;
mod augment;
mod bench;
mod config;
mod evaluate;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use privicl::aggregation::AggregationError;
use privicl::backend::BackendError;
use privicl::mia::AttackError;
use privicl::pipeline::{Aggregation, PipelineError};

use config::BackendKind;

#[derive(Debug, Parser)]
#[command(
    name = "privicl",
    version,
    about = "Differentially private in-context learning"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    parallel_width: Option<usize>,
    /// Validate configuration and datasets without calling any backend.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct EnsembleOverrides {
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    subsample: Option<f64>,
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown aggregation {s:?} (sga-topk, sga-top1, ksa, ksa-no-public)"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer every test query with the private pipeline.
    Run {
        #[command(flatten)]
        overrides: EnsembleOverrides,
        /// Refuse queries once the composed epsilon would exceed this.
        #[arg(long)]
        total_epsilon: Option<f64>,
    },
    /// Account a composition plan (JSON) or calibrate one of its parameters.
    Account {
        plan: PathBuf,
        /// Solve for this parameter so the plan meets --target-epsilon.
        #[arg(long, value_enum, requires = "target_epsilon")]
        calibrate: Option<account::Free>,
        #[arg(long)]
        target_epsilon: Option<f64>,
        /// Print the per-entry breakdown.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Run the repeat membership-inference attack.
    Attack {
        #[command(flatten)]
        overrides: EnsembleOverrides,
        /// none, aggregate, or private (uses --epsilon).
        #[arg(long, value_enum)]
        defense: Option<attack::DefenseArg>,
    },
    /// Score predictions against references.
    Evaluate {
        predictions: PathBuf,
        references: PathBuf,
    },
    /// Grow the public pool with generated examples near the private data.
    Augment {
        #[arg(long)]
        n_generate: Option<usize>,
    },
    /// Compare embedding caching or coreset selection.
    Bench {
        #[arg(value_enum)]
        mode: bench::Mode,
    },
}

/// Maps an error to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            if matches!(e, PipelineError::BudgetExhausted { .. }) {
                return 4;
            }
            if e.is_backend() {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<AttackError>() {
            match e {
                AttackError::InsufficientScored { .. } => return 5,
                AttackError::Backend(_) => return 3,
                AttackError::Pipeline(p) if p.is_backend() => return 3,
                _ => {}
            }
        }
        if cause
            .downcast_ref::<AggregationError>()
            .is_some_and(|e| matches!(e, AggregationError::Backend { .. }))
        {
            return 3;
        }
        if cause.downcast_ref::<BackendError>().is_some() {
            return 3;
        }
    }
    2
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Run {
            overrides,
            total_epsilon,
        } => run::cmd_run(&common, &overrides, total_epsilon),
        Command::Account {
            plan,
            calibrate,
            target_epsilon,
            verbose,
        } => account::cmd_account(&common, &plan, calibrate, target_epsilon, verbose),
        Command::Attack { overrides, defense } => attack::cmd_attack(&common, &overrides, defense),
        Command::Evaluate {
            predictions,
            references,
        } => evaluate::cmd_evaluate(&common, &predictions, &references),
        Command::Augment { n_generate } => augment::cmd_augment(&common, n_generate),
        Command::Bench { mode } => bench::cmd_bench(&common, mode),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
