//! `mixcon`: experiments for separability-controlled split learning.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on usage errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mixcon", version, about = "MixCon training, inversion attacks and the SAT reduction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization, batching and attacks
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: results)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and per-sample attacks
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic study: utility table, hidden-feature dumps and ℓ1 inversion
    Synth(SynthArgs),
    /// Train one network and save its weights and history
    Train(TrainArgs),
    /// Attack a saved network's cut-layer features
    Invert(InvertArgs),
    /// Grid over (λ, β) recording accuracy and separability
    Sweep(SweepArgs),
    /// Build and verify the SAT-to-ReLU reduction for a DIMACS formula
    Reduce(ReduceArgs),
    /// Vanilla vs MixCon privacy/utility report on image data
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Test samples attacked per model
    #[arg(long)]
    pub attack_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// IDX directory; switches the data source to IDX
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// synthetic_mlp, deeper, wider or lenet5
    #[arg(long)]
    pub network: Option<String>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Weights written by `mixcon train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated λ values
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated β values
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// DIMACS CNF file
    pub dimacs: Option<PathBuf>,
    /// Copies per variable (default 100·B²)
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub attack_samples: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
