//! `srpo`: data generation, exploration, training and evaluation runs for the
//! hazard-mix lab. Every run writes its outputs and a checksummed manifest
//! into one directory.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use srpo_core::exploration::CORPUS_VERSION;
use srpo_core::model::CHECKPOINT_VERSION;
use srpo_core::optimization::Method;
use srpo_core::pipeline::DATASET_VERSION;

#[derive(Debug, Parser)]
#[command(name = "srpo", about = "Safety-aware reasoning path optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a question dataset through the staged pipeline.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Explore contrastive pairs with a policy checkpoint.
    Explore {
        /// Policy to explore with; defaults to the seed's initial policy.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy with SRPO or a baseline.
    Train {
        #[arg(long, default_value = "srpo")]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Starting checkpoint; defaults to the seed's initial policy.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint's reasoning paths.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Monte-Carlo draws per question; implies sampled evaluation.
        #[arg(long)]
        samples: Option<usize>,
        /// Use exact enumeration instead of sampling.
        #[arg(long, conflicts_with = "samples")]
        exact: bool,
        /// Keep only hazardous questions.
        #[arg(long)]
        hazardous: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train SRPO across lambda values and seeds.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        values: Vec<f64>,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hazardous: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train several methods on identical data and report paired deltas.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "srpo,sft,dpo,orpo")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hazardous: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic loss gradients against central differences.
    Gradcheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Parameters probed per loss.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Verify a run directory and print its summary.
    Report {
        run_dir: PathBuf,
        /// Also copy the run's plot-ready series to this file.
        #[arg(long)]
        plot_out: Option<PathBuf>,
    },
}

fn version() -> String {
    format!(
        "{} (dataset schema {DATASET_VERSION}, corpus schema {CORPUS_VERSION}, checkpoint {CHECKPOINT_VERSION}, manifest {})",
        env!("CARGO_PKG_VERSION"),
        manifest::MANIFEST_VERSION
    )
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let matches = match Cli::command().version(version()).try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    match commands::dispatch(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
