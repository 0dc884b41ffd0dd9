use thiserror::Error;

/// Errors raised by the model, rate evaluation, optimizer and harness.
#[derive(Debug, Error)]
pub enum IsacError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// No point satisfying the per-user rate requirement was found.
    /// Carries the last slack values (nats/s) reported by the feasibility phase.
    #[error("infeasible scenario: {reason} (terminal slacks {slacks:?})")]
    InfeasibleScenario { reason: String, slacks: Vec<f64> },

    /// Covariance rank exceeds the number of streams, so exact recovery by
    /// eigendecomposition is impossible.
    #[error("covariance rank {rank} exceeds stream count {streams}; randomized recovery required")]
    NeedsRandomization { rank: usize, streams: usize },

    #[error("argument of log-det is not positive definite")]
    NotPositiveDefinite,

    #[error("subproblem solver failed: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IsacError>;

pub(crate) fn invalid(msg: impl Into<String>) -> IsacError {
    IsacError::InvalidArgument(msg.into())
}
