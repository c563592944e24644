//! Command-line interface: dataset ingestion, model fitting, simulation
//! studies, eigen-spectrum export, and fit comparison tables.
//!
//! Exit codes: 0 on success, 2 on configuration/validation errors, 3 on
//! runtime or numeric failures.

use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub mod commands;
pub mod config;

/// Error carrying the intended process exit code.
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        CliError {
            message,
            exit_code: 2,
        }
    }

    pub fn runtime(message: String) -> Self {
        CliError {
            message,
            exit_code: 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

#[derive(Parser)]
#[command(
    name = "mspatplus",
    about = "Multivariate areal count models with one-step spectral covariate decorrelation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit one model to a dataset and write posterior summaries.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Override the RNG seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a simulation study and write the metrics report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write the eigen-spectrum of a graph's neighbourhood matrix.
    Eigen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Graph spec (`grid:RxC` or an edge-list file), alternative to --config.
        #[arg(long)]
        graph: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the eigenvector columns.
        #[arg(long, default_value_t = false)]
        include_vectors: bool,
    },
    /// Join several fit outputs into one comparison table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit {
            config,
            seed,
            out_dir,
        } => commands::cmd_fit(&config, seed, out_dir),
        Command::Simulate {
            config,
            seed,
            out_dir,
        } => commands::cmd_simulate(&config, seed, out_dir),
        Command::Eigen {
            config,
            graph,
            out,
            include_vectors,
        } => commands::cmd_eigen(config.as_deref(), graph.as_deref(), out, include_vectors),
        Command::Compare { config, out_dir } => commands::cmd_compare(&config, out_dir),
    }
}
