use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value at index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("batchnorm received an empty batch")]
    EmptyBatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot encode label {id}: {reason}")]
    Encoding { id: usize, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("no occupied slot to classify against")]
    NoPrototype,

    #[error("gradient for parameter `{name}` contains NaN or Inf")]
    NonFiniteGradient { name: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("load error at {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"))
    }
}
