//! `care`: aggregate judge scores, generate synthetic data, and run the
//! benchmark and theory suites.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use care_core::CareError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "care", version, about = "Confounder-aware aggregation of judge scores")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "CARE_SEED", default_value_t = 0)]
    seed: u64,

    /// Directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate a CSV of judge scores.
    Aggregate(AggregateArgs),
    /// Write a synthetic score matrix and its planted parameters.
    Synth(SynthArgs),
    /// Run a synthetic benchmark experiment.
    Bench(BenchArgs),
    /// Run the empirical checks of the recovery guarantees.
    CheckTheory(TheoryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Avg,
    Mv,
    Ds,
    CareSvd,
    CareTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Rule {
    Leading,
    Balanced,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Weights {
    Plain,
    ConfounderSubtracted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PartitionFrom {
    /// Sparse part of the SPLR split.
    Sparse,
    /// Empirical precision of the standardized scores.
    Precision,
}

#[derive(Debug, Clone, Args, Serialize)]
struct AggregateArgs {
    /// Headed CSV, one column per judge.
    input: PathBuf,

    #[arg(long, value_enum, default_value_t = Method::CareSvd)]
    method: Method,

    /// Column holding ground truth; enables the grid search and metrics.
    #[arg(long)]
    truth_col: Option<String>,

    #[arg(long, value_enum, default_value_t = Rule::Leading)]
    rule: Rule,

    #[arg(long, value_enum, default_value_t = Weights::Plain)]
    weights: Weights,

    /// Sparsity weight used when no grid search runs.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,

    /// Low-rank weight used when no grid search runs.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,

    /// Skip the grid search even when truth is available.
    #[arg(long)]
    no_grid: bool,

    /// Held-out fraction for the grid search.
    #[arg(long, default_value_t = care_core::dataio::DEFAULT_VAL_FRACTION)]
    val_frac: f64,

    /// Edge threshold for the tri-view partition.
    #[arg(long, default_value_t = care_core::partition::DEFAULT_EPS)]
    eps: f64,

    /// Local-search restarts for the tri-view partition.
    #[arg(long, default_value_t = care_core::partition::DEFAULT_RESTARTS)]
    restarts: usize,

    /// Matrix the tri-view partition is computed from.
    #[arg(long, value_enum, default_value_t = PartitionFrom::Sparse)]
    partition_from: PartitionFrom,

    /// Vote threshold for majority vote; inferred from the data when absent.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Regime {
    A,
    B,
    Graph,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    regime: Regime,

    /// Number of items; each regime has its own default.
    #[arg(long)]
    n: Option<usize>,

    /// Confounder strength in [0, 1] for regimes A and B.
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Experiment {
    /// Graph-aware versus random view partitions on planted dependencies.
    #[value(name = "d9", alias = "partition-study")]
    #[serde(rename = "d9")]
    PartitionStudy,
    RegimeA,
    RegimeB,
}

#[derive(Debug, Clone, Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,

    /// Seeds per setting; each experiment has its own default.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TheoryArgs {
    /// Seeds per sample size in the rate checks.
    #[arg(long, default_value_t = 10)]
    seeds: usize,

    /// Models per check; each check has its own default.
    #[arg(long)]
    models: Option<usize>,

    /// Observation vectors per model in the misspecification check.
    #[arg(long, default_value_t = 1000)]
    observations: usize,

    /// Sample sizes for the rate checks.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000usize, 4_000, 16_000, 64_000])]
    sizes: Vec<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<CareError>().is_some_and(CareError::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = std::fs::create_dir_all(&cli.out)
        .map_err(anyhow::Error::from)
        .and_then(|()| match &cli.command {
            Command::Aggregate(a) => commands::aggregate(a, cli.seed, &cli.out),
            Command::Synth(a) => commands::synth(a, cli.seed, &cli.out),
            Command::Bench(a) => commands::bench(a, cli.seed, &cli.out),
            Command::CheckTheory(a) => commands::check_theory(a, cli.seed, &cli.out),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
