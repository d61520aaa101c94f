use alloc::string::String;

/// Errors raised anywhere in the aggregation pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum FlError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("non-finite gradient at coordinate {index} (value {value})")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dither seed mismatch: payload carries {expected}, decoder was given {actual}")]
    SeedMismatch { expected: u64, actual: u64 },

    #[error("payload kind `{0}` cannot be used here")]
    UnsupportedPayload(&'static str),

    #[error("noise and interference power are both zero: rate is unbounded")]
    UnboundedRate,

    #[error("infeasible assignment: {users} users for {blocks} blocks")]
    InfeasibleAssignment { users: usize, blocks: usize },

    #[error("empty participant set")]
    EmptySelection,

    #[error("too few rows ({rows}) for {requirement}")]
    TooFewRows {
        rows: usize,
        requirement: &'static str,
    },

    #[error("operation not supported for loss `{0}`")]
    UnsupportedLoss(&'static str),

    #[error("insufficient data: {available} samples for {users} users")]
    InsufficientData { available: usize, users: usize },

    #[error("linear algebra failure: {0}")]
    Numerical(&'static str),
}

pub type Result<T> = core::result::Result<T, FlError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> FlError {
    FlError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(FlError::DimensionMismatch { expected, actual })
    }
}
