use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("unknown categories in log: {}", .0.join(", "))]
    UnknownCategory(Vec<String>),

    #[error("degenerate candidate {ad_id}: zero ctr with alpha > 0")]
    DegenerateCandidate { ad_id: String },

    #[error("baseline {metric} is undefined (zero denominator)")]
    ZeroDenominator { metric: &'static str },

    #[error("numeric failure at outer iteration {outer}, inner iteration {inner}: {message}")]
    Numeric {
        outer: usize,
        inner: usize,
        message: String,
    },

    #[error("bad table file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
