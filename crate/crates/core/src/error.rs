use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("embedding_lookup: index {index} out of range for table of {size} rows")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),

    #[error("ctc: target unalignable for utterance {utterance}: needs at least {needed} frames, have {have}")]
    Unalignable {
        utterance: String,
        needed: usize,
        have: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
