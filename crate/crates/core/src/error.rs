use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate direction (norm below threshold)")]
    DegenerateDirection,
    #[error("degenerate merge system (curvature below threshold)")]
    DegenerateSystem,
    #[error("SVD did not converge within {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },
    #[error("cache length {len} below compression trigger {required}")]
    InsufficientLength { len: usize, required: usize },
    #[error("cannot select {requested} disjoint adjacent pairs (only {available} possible)")]
    InsufficientPairs { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("compression is disabled for algorithm `none`")]
    CompressionDisabled,
}

pub type Result<T> = std::result::Result<T, Error>;
