use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward() requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("tape was created without gradient recording")]
    NoGrad,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            dim,
            expected,
            got,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
