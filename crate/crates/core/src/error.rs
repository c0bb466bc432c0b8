use thiserror::Error;

/// Errors raised by the kernels, the reference oracle and the allocation ledger.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("buffer holds {got} elements, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-contiguous input `{0}`; materialize a contiguous copy before calling the kernel")]
    NonContiguousInput(&'static str),

    #[error("rotary head dimension must be even, got {0}")]
    OddHeadDim(usize),

    #[error("target {target} at row {row} is outside the vocabulary of size {vocab}")]
    TargetOutOfRange { row: usize, target: usize, vocab: usize },

    #[error("function evaluated to a non-finite value while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("free of {bytes} bytes under tag `{tag}` does not match an outstanding allocation")]
    UnbalancedFree { tag: String, bytes: u64 },

    #[error("invalid chunk size {0}: must be a power of two")]
    InvalidChunkSize(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fixture parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
