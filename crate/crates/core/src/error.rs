use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cholesky factorization failed at pivot {pivot} (value {value:e})")]
    Factorization { pivot: usize, value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampler diverged at step {step}: energy {energy}")]
    SamplerDivergence { step: usize, energy: f64 },

    #[error("training diverged at iteration {iter}: {reason}")]
    TrainingDivergence { iter: u64, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Degenerate(_) => 3,
            Error::SamplerDivergence { .. } | Error::TrainingDivergence { .. } => 4,
            Error::ShapeMismatch { .. } | Error::Factorization { .. } | Error::Invariant(_) => 5,
        }
    }
}
