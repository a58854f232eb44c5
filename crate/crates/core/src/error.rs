use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("sequence length {len} exceeds block size {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint does not match configuration: {0}")]
    Version(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
