//! Experiment orchestration behind the `mcfrcl` binary.

pub mod config;
pub mod experiment;

use std::path::PathBuf;

pub use config::{load_config, parse_config, DatasetKind, ExperimentConfig};
pub use experiment::{compare_baseline, run, sweep};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mcfrcl::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "training",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(_) => 4,
        }
    }
}
