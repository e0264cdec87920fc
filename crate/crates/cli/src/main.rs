//! `head`: dataset creation, detector training, time-saving analysis and
//! live abort-and-reseed campaigns.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use head_core::detector::Variant;

use crate::config::PromptSet;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(head_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl From<head_core::Error> for CliError {
    fn from(e: head_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "head", version, about = "Early hallucination detection for a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and label the prompt x seed dataset with captures.
    MakeDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        seeds_per_prompt: Option<usize>,
        #[arg(long)]
        global_seed: Option<u64>,
        #[arg(long)]
        faithfulness: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        critical_steps: Option<Vec<usize>>,
    },
    /// Fit a detector on the training prompts of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Critical steps consumed by the detector (comma separated).
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        target_recall: Option<f64>,
    },
    /// Confusion metrics of a trained detector on a prompt split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        split: Option<PromptSet>,
    },
    /// Expected cost of the abort policy: closed form and Monte Carlo.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Probability that a generation is complete.
        #[arg(long)]
        p: Option<f64>,
        /// Per-object recall (one value is broadcast).
        #[arg(long, value_delimiter = ',', required = true)]
        recall: Vec<f64>,
        /// Per-object TN-rate (one value is broadcast).
        #[arg(long, value_delimiter = ',', required = true)]
        tn_rate: Vec<f64>,
        /// Abort-cost fraction t_last / T.
        #[arg(long)]
        f: f64,
        #[arg(long)]
        objects: Option<usize>,
        /// Monte Carlo trials; 0 skips the simulation.
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Savings across detectors with different t_last.
    SweepTlast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Model files or train output directories (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<PromptSet>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-form saving against completeness probability.
    SweepP {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<PromptSet>,
        #[arg(long, value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
    },
    /// Paired live campaign: baseline against early abort.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        root_seed: Option<u64>,
        #[arg(long)]
        eval_seeds: Option<usize>,
        #[arg(long, value_enum)]
        prompts: Option<PromptSet>,
        #[arg(long)]
        max_restarts: Option<usize>,
    },
    /// Summary tables from sweep and campaign CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directories holding sweep_tlast.csv, sweep_p.csv or campaign.csv.
        #[arg(long, value_delimiter = ',', required = true)]
        input: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
