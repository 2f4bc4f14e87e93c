use std::path::PathBuf;

use rftensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("incompatible weights: {}", .0.join("; "))]
    WeightMismatch(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for PoseError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => PoseError::Numerical(e.to_string()),
            other => PoseError::Tensor(other),
        }
    }
}

impl PoseError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PoseError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PoseError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PoseError::Config(_) | PoseError::InvalidInput(_) => 1,
            PoseError::Numerical(_) => 3,
            PoseError::Scene(_)
            | PoseError::Io { .. }
            | PoseError::Format { .. }
            | PoseError::WeightMismatch(_)
            | PoseError::Tensor(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PoseError>;
