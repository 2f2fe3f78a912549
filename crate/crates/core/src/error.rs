use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("rank {rank} exceeds the supported maximum of 4")]
    RankTooHigh { rank: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("division by exact zero")]
    DivByZero,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("linear solve failed: matrix not positive definite")]
    NotPositiveDefinite,
    #[error("empty reduction: zero elements along the requested axes")]
    EmptyReduction,
    #[error("{0}")]
    Invalid(String),
}

/// Errors from the training harness, task suite, and I/O surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad idx file: {0}")]
    Idx(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("non-finite meta-objective in unroll segment (step {step})")]
    NonFiniteObjective { step: usize },
    #[error("worker {worker_id} failed: {msg}")]
    Worker { worker_id: usize, msg: String },
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
