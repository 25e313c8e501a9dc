use thiserror::Error;

/// Errors produced by the reserving engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("validation: {0}")]
    Validation(String),
    /// A numerical routine failed (singular system, divergence, pathology).
    #[error("computation: {0}")]
    Computation(String),
    /// A fit ran out of iterations without meeting its convergence criterion.
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }
}
