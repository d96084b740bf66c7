//! Optimizer, training loop, file formats and report tables.

pub mod dataset;
pub mod io;
pub mod optim;
pub mod oracles;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelError;
use crate::setloss::LossError;
use crate::simulator::SimError;
use crate::targets::TargetError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for missing or unreadable files and malformed file contents.
    pub fn is_file_error(&self) -> bool {
        matches!(self, HarnessError::Io { .. } | HarnessError::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[cfg(test)]
mod tests;
