//! Command-line driver: configuration parsing and run orchestration.
//!
//! A run writes into its output directory:
//!
//! - `resolved_config.toml`, the configuration with every default filled in;
//! - `trajectories.csv` (or `.json`), `agent,step,t,x1,...,xd`;
//! - `cost_report.json`;
//! - `residual_history.csv`, `iteration,residual,objective`;
//! - optionally `kernel_error_curve.csv` and `kernel_slice.csv`.
//!
//! Exit statuses: 0 converged, 1 configuration or usage error, 2 stopped at
//! `max_iterations` without converging, 3 diverged, 4 I/O failure.

pub mod config;
mod run;

use std::process::ExitCode;

pub use config::{parse_config, RunConfig};
pub use run::{kernel_bench, run, RunOptions, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rfmfg_core::Error),
    #[error("io: {context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status())
    }

    pub fn status(&self) -> u8 {
        match self {
            CliError::Config(_) => status::USAGE,
            CliError::Core(rfmfg_core::Error::Diverged { .. }) => status::DIVERGED,
            CliError::Core(rfmfg_core::Error::Io(_)) | CliError::Io { .. } => status::IO,
            CliError::Core(_) => status::USAGE,
        }
    }
}

pub mod status {
    pub const CONVERGED: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const NOT_CONVERGED: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const IO: u8 = 4;
}
