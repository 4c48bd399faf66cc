//! `inkline` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent data (exit 2).
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "inkline",
    version,
    about = "Handwritten word recognition toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every randomized step (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize every PNG in a directory.
    Normalize(commands::NormalizeArgs),
    /// Write randomly augmented variants of one image plus a preview grid.
    Augment(commands::AugmentArgs),
    /// Generate a synthetic word dataset from a glyph set.
    Synth(commands::SynthArgs),
    /// Train a recognizer on a manifest dataset.
    Train(commands::TrainArgs),
    /// Decode a dataset partition with a trained model.
    Evaluate(commands::EvaluateArgs),
    /// Snap predictions to the nearest lexicon words.
    Decode(commands::DecodeArgs),
    /// CER/WER with bootstrap intervals from a predictions file.
    Report(commands::ReportArgs),
    /// Print the layer table of a convolutional classifier.
    InspectModel(commands::InspectArgs),
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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
