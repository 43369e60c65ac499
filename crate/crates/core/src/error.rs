use thiserror::Error;

/// Errors raised by the policy, task, objective and training routines.
#[derive(Debug, Error)]
pub enum DiscoError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A rollout group whose rewards are all equal, so the normalized
    /// advantage is undefined.
    #[error("degenerate group for question {question_id}: p_hat = {p_hat}")]
    DegenerateGroup { question_id: usize, p_hat: f64 },

    /// Every group in the batch was skipped.
    #[error("empty batch: every group is degenerate or the batch has no groups")]
    EmptyBatch,

    /// Exhaustive enumeration would exceed the configured budget.
    #[error("capacity exceeded: {needed} sequences to enumerate, budget is {budget}")]
    Capacity { needed: u128, budget: u64 },

    /// An objective or run was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized file could not be decoded.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiscoError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(DiscoError::Domain(msg.into()))
}
