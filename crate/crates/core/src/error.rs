use std::path::PathBuf;

use ndgrad::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgstaError {
    #[error(transparent)]
    Tensor(#[from] NdError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: u64,
        column: String,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("{0}")]
    Metric(String),
}

impl CgstaError {
    /// Whether the error reports NaN, infinity or an out-of-domain value
    /// rather than bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Numeric { .. }
                | Self::Tensor(NdError::LogDomain { .. } | NdError::DivideByZero { .. } | NdError::NonFinite { .. })
        )
    }

    /// Attach a training step to numeric failures; other errors pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Self::Numeric { message, .. } => Self::Numeric { step, message },
            e if e.is_numeric() => Self::Numeric { step, message: e.to_string() },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CgstaError> = std::result::Result<T, E>;
