//! File formats, image IO and the command implementations behind the
//! `cadyq` binary.

use thiserror::Error;

pub mod cli;
pub mod commands;
pub mod config;
pub mod imageio;
pub mod model;

pub use config::Config;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model mismatch: {0}")]
    Manifest(String),
    #[error("no input data: {0}")]
    NoData(String),
    #[error(transparent)]
    Core(cadyq_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<cadyq_core::Error> for CliError {
    fn from(e: cadyq_core::Error) -> Self {
        match e {
            cadyq_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Manifest(_) => 3,
            CliError::NoData(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
