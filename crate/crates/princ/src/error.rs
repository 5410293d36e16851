//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor math, the text pipeline, training, evaluation
/// and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A vector whose norm is below the degeneracy threshold was passed to an
    /// operation that divides by it (cosine similarity, prototype init).
    #[error("degenerate vector: norm {norm:e} is below {min:e}")]
    Degenerate { norm: f64, min: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate name: {0:?}")]
    DuplicateName(String),

    #[error("unknown parameter: {0:?}")]
    UnknownParam(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed checkpoint or embedding file (bad magic, truncation,
    /// unsupported version).
    #[error("bad file format: {0}")]
    Format(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
