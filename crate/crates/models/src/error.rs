use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] distadapt_nn::NnError),
    #[error(transparent)]
    Core(#[from] distadapt_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at {at}; last checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged {
        at: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("image {height}x{width} is smaller than the minimum {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
