use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FvError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    /// Bad configuration or arguments, detected before any work starts.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violating a documented contract.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FvError>,
    },
}

pub type Result<T, E = FvError> = std::result::Result<T, E>;

impl FvError {
    /// True for errors caused by the caller's configuration or inputs rather
    /// than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            FvError::Config(_) | FvError::Invalid(_) | FvError::Parse { .. } => true,
            FvError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FvError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        FvError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> FvError {
    FvError::Config(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> FvError {
    FvError::Invalid(msg.into())
}
