//! `grayrank`: staged pipeline for grayscale response-selection training.

mod config;
mod failure;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use grayrank_core::Split;

use crate::stages::Run;

#[derive(Parser)]
#[command(
    name = "grayrank",
    version,
    about = "Grayscale learning-to-rank for dialogue response selection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.mode=uni`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory holding every artifact of the run.
    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load (or synthesize) corpora; write vocabulary and turn pairs.
    Ingest {
        /// Generate the bundled topic corpus instead of reading data.* paths.
        #[arg(long)]
        make_synthetic: bool,
    },
    /// Build the BM25 index over turn-pair inputs.
    BuildIndex,
    /// Count the n-gram language model over turn-pair responses.
    TrainLm,
    /// Beam-search responses for every training context.
    Generate,
    /// Assemble grayscale sets from retrieval, generation and random responses.
    BuildGrayscale,
    /// Train the matching model.
    Train,
    /// Evaluate a checkpoint on candidate groups.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Checkpoint to load instead of the run's model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-group scores and rankings.
        #[arg(long)]
        dump: bool,
    },
    /// Train and evaluate once per margin in sweep.margins.
    SweepMargin,
    /// Train and evaluate once per objective in ablation.modes.
    Ablate,
    /// Run every stage from ingest to test evaluation.
    RunAll {
        #[arg(long)]
        make_synthetic: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config = config::resolve(cli.common.config.as_deref(), &cli.common.overrides)?;
    let run = Run::new(cli.common.run_dir, config)?;
    match cli.command {
        Command::Ingest { make_synthetic } => stages::ingest(&run, make_synthetic),
        Command::BuildIndex => stages::build_index(&run),
        Command::TrainLm => stages::train_lm(&run),
        Command::Generate => stages::generate(&run),
        Command::BuildGrayscale => stages::build_grayscale_stage(&run),
        Command::Train => stages::train_stage(&run),
        Command::Evaluate {
            split,
            checkpoint,
            dump,
        } => stages::evaluate_stage(&run, split, checkpoint.as_deref(), dump).map(|_| ()),
        Command::SweepMargin => stages::sweep_margin(&run),
        Command::Ablate => stages::ablate(&run),
        Command::RunAll { make_synthetic } => stages::run_all(&run, make_synthetic).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(failure::exit_kind(&err) as u8)
        }
    }
}
