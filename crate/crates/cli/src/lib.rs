//! Seeded experiment runner for LoRA gradient descent.
//!
//! `run` writes a trace, `verify` re-checks a trace directory against the
//! convergence inequalities, and `compare` pits LoRA against full-rank
//! gradient descent from the same initial product.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{cmd_compare, cmd_run, cmd_verify, Options};
pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: ConfigError },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: lora_gd_core::Error },

    #[error(transparent)]
    Compute(#[from] lora_gd_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// A non-finite value during optimization is a failed run, not a usage
    /// problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Compute(lora_gd_core::Error::NonFinite(_)) => EXIT_FAILED,
            _ => EXIT_USAGE,
        }
    }
}
