//! Command-line driver: argument parsing, configuration merging and the
//! subcommands that run the pipeline and write archives, reports and CSVs.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Options;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "osaq", version, about = "Null-space outlier suppression for low-bit weight quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommandArgs {
    /// JSON config file mirroring the flags. Flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate per-layer Hessians over calibration text.
    Calibrate(CommandArgs),
    /// Absorb outliers into the Hessian null space and audit FP perplexity.
    Absorb(CommandArgs),
    /// Quantize every linear layer and report reconstruction metrics.
    Quantize(CommandArgs),
    /// Compare FP, RTN, compensated and their absorbed variants end to end.
    Eval(CommandArgs),
    /// Null-space overlap between two calibration splits.
    Stability(CommandArgs),
    /// Grid over gamma, tau_rel, mu1 and mu2.
    Sweep(CommandArgs),
    /// Weight histogram of one layer before and after absorption.
    Hist(CommandArgs),
    /// Write the seeded toy model as an archive.
    Init(CommandArgs),
    /// Write a token file from the model or a synthetic generator.
    GenTokens(CommandArgs),
}

impl Command {
    fn args(&self) -> &CommandArgs {
        match self {
            Command::Calibrate(a)
            | Command::Absorb(a)
            | Command::Quantize(a)
            | Command::Eval(a)
            | Command::Stability(a)
            | Command::Sweep(a)
            | Command::Hist(a)
            | Command::Init(a)
            | Command::GenTokens(a) => a,
        }
    }
}

/// Runs one command and returns its one-line summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let args = cli.command.args();
    let file = match &args.config {
        Some(path) => Options::from_file(path)?,
        None => Options::default(),
    };
    let cfg = file.overlay(args.options.clone()).resolve()?;
    match cli.command {
        Command::Calibrate(_) => commands::cmd_calibrate(&cfg),
        Command::Absorb(_) => commands::cmd_absorb(&cfg),
        Command::Quantize(_) => commands::cmd_quantize(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::Stability(_) => commands::cmd_stability(&cfg),
        Command::Sweep(_) => commands::cmd_sweep(&cfg),
        Command::Hist(_) => commands::cmd_hist(&cfg),
        Command::Init(_) => commands::init(&cfg),
        Command::GenTokens(_) => commands::gen_tokens(&cfg),
    }
}
