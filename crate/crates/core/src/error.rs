use thiserror::Error;

/// Errors produced by the attention substrate, planner and kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("tensor dimensions must all be >= 1, got {0:?}")]
    ZeroDim([usize; 4]),

    #[error("data length {actual} does not match dims product {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty score vector")]
    EmptyScores,

    #[error("empty pooling range")]
    EmptyPoolingRange,

    #[error("pooling range {start}..{end} outside sequence of length {len}")]
    PoolingRangeOutOfBounds { start: usize, end: usize, len: usize },

    #[error("gather index out of bounds: {index} >= {len}")]
    GatherOutOfBounds { index: usize, len: usize },

    #[error("scatter index out of bounds: {index} >= {len}")]
    ScatterOutOfBounds { index: usize, len: usize },

    #[error("scatter collision at row {0}")]
    ScatterCollision(usize),

    #[error("uncovered query row {0}")]
    UncoveredRow(usize),

    #[error("uninitialized state")]
    UninitializedState,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty ordering")]
    EmptyOrdering,
}

pub type Result<T> = std::result::Result<T, Error>;
