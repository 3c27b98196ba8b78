use std::path::PathBuf;

use crate::data::checkpoint::CheckpointError;
use crate::data::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward called before a recorded forward pass")]
    BackwardBeforeForward,

    #[error("non-finite loss at epoch {epoch}, batch {batch} (max |decoder output| {max_output:.3e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        max_output: f64,
    },

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Numerical(_))
    }
}
