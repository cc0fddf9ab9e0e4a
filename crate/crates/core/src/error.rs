use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("label {value} at index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("class label {value} at index {index} is out of range for {classes} classes")]
    InvalidClass {
        index: usize,
        value: usize,
        classes: usize,
    },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("encoder expects {expected} input, got {actual}")]
    ModalityMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("batch misalignment: {left} vs {right} rows")]
    BatchMisaligned { left: usize, right: usize },
    #[error("pool needs at least 2 clips, got {0}")]
    PoolTooSmall(usize),
    #[error("batch needs at least {needed} clips, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("loss weights invalid: {}", .0.join("; "))]
    InvalidWeights(Vec<String>),
    #[error("clustering: {0}")]
    Clustering(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
