use thiserror::Error;

use crate::schedules::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid stochastic matrix: {0}")]
    InvalidMatrix(String),

    #[error("kernel is not ergodic: {0}")]
    NonErgodic(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("proposal inconsistency: {0}")]
    ProposalInconsistency(String),

    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    #[error("state space has {size} states, cap is {cap}")]
    Size { size: usize, cap: usize },

    #[error("invalid schedule: {0}")]
    Schedule(Violation),

    #[error("invalid parameters: {0}")]
    Parameter(String),

    #[error("liveness failure: {0}")]
    Liveness(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("bin coverage: {0}")]
    Coverage(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
