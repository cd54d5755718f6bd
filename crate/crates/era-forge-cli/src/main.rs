//! Command-line interface: feature extraction, training, evaluation,
//! cross-validation, embedding export, and the synthetic dataset generator.

mod commands;
mod config;
mod run_manifest;

use clap::{Parser, Subcommand};

use commands::{
    crossval::CrossvalArgs, distribution::PlotArgs, evaluate_cmd::EvaluateArgs,
    export::ExportArgs, extract::ExtractArgs, gen_synthetic::GenArgs, train_cmd::TrainArgs,
};

#[derive(Parser)]
#[command(name = "era-forge", version, about = "Music era recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert WAV audio referenced by a manifest into mel-feature files
    ExtractFeatures(ExtractArgs),
    /// Train one model variant, producing a checkpoint and loss curve
    Train(TrainArgs),
    /// Score a checkpoint on a manifest (optionally one fold's test split)
    Evaluate(EvaluateArgs),
    /// K-fold cross-validation: train and evaluate per fold, report means
    Crossval(CrossvalArgs),
    /// Export per-track embeddings from a checkpoint
    ExportEmbeddings(ExportArgs),
    /// Emit the per-year track histogram as CSV
    PlotDistribution(PlotArgs),
    /// Generate a synthetic dataset (manifest + features + biographies)
    GenSynthetic(GenArgs),
}

/// Usage problems exit 2; runtime failures exit 1.
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<era_forge::Error> for CliError {
    fn from(e: era_forge::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult = Result<(), CliError>;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ExtractFeatures(args) => commands::extract::run(args),
        Command::Train(args) => commands::train_cmd::run(args),
        Command::Evaluate(args) => commands::evaluate_cmd::run(args),
        Command::Crossval(args) => commands::crossval::run(args),
        Command::ExportEmbeddings(args) => commands::export::run(args),
        Command::PlotDistribution(args) => commands::distribution::run(args),
        Command::GenSynthetic(args) => commands::gen_synthetic::run(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
