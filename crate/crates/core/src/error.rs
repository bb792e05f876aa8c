use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("partition failed after {0} attempts: some device received no samples")]
    PartitionFailed(usize),

    #[error("could not draw a connected graph after {0} attempts")]
    DisconnectedGraph(usize),

    #[error("mixing matrix violates the doubly stochastic assumptions: {0}")]
    InvalidMixingMatrix(String),

    #[error("eigen-decomposition failed")]
    EigenFailure,

    #[error("empty cluster {0}")]
    EmptyCluster(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
