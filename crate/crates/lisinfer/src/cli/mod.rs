//! Command-line front end.
//!
//! Exit codes follow a fixed convention: `0` for success, `2` for usage and
//! configuration problems (including unreadable input files), `3` for
//! numerical failures such as a singular system or an aborted chain.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::estimators::EstimatorError;
use crate::io::IoError;
use crate::lis::LisError;
use crate::mcmc::McmcError;
use crate::model::ModelError;
use crate::models::BuildError;
use crate::prior::PriorError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments, or input files; maps to exit code 2.
    #[error("{0}")]
    Config(String),
    /// A numerical failure in an otherwise well-posed run; exit code 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<McmcError> for CliError {
    fn from(e: McmcError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<LisError> for CliError {
    fn from(e: LisError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::RadiiNotAscending => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Subspace(inner) => CliError::Numerical(inner.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Arguments shared by every subcommand.
#[derive(Debug, clap::Args)]
pub struct CmdArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Subspace file produced by `build-lis`.
    #[arg(long)]
    pub lis: Option<PathBuf>,
    /// Chain file produced by `sample`; repeatable.
    #[arg(long = "chain")]
    pub chain: Vec<PathBuf>,
    /// Output directory, overriding `output.dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding `seeds.master` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Adapt a likelihood-informed subspace and write it to disk.
    BuildLis(CmdArgs),
    /// Run MALA chains on the full or subspace posterior.
    Sample(CmdArgs),
    /// Turn chains into mean and variance fields.
    Estimate(CmdArgs),
    /// Autocorrelation and effective-sample-size diagnostics.
    Diagnose(CmdArgs),
    /// Self-checks on configs, subspace files, and chains.
    Verify(CmdArgs),
}

#[derive(Debug, Parser)]
#[command(name = "lisinfer", version, about = "Likelihood-informed subspace inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

pub fn main_entry() -> ExitCode {
    if let Ok(threads) = std::env::var("LISINFER_THREADS") {
        if let Ok(n) = threads.trim().parse::<usize>() {
            if n > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
        }
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildLis(args) => commands::cmd_build_lis(args),
        Command::Sample(args) => commands::cmd_sample(args),
        Command::Estimate(args) => commands::cmd_estimate(args),
        Command::Diagnose(args) => commands::cmd_diagnose(args),
        Command::Verify(args) => commands::cmd_verify(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
