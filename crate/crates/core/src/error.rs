use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("variable spec: {0}")]
    Spec(String),

    #[error("data: {0}")]
    Data(String),

    #[error("alignment: features cover hours {features:?} but embedding track covers {track:?}")]
    Alignment {
        features: (usize, usize),
        track: (usize, usize),
    },

    #[error("capacity: sequence of {hours} hours exceeds max_sequence_hours = {max}")]
    Capacity { hours: usize, max: usize },

    #[error("lookup: {0}")]
    Lookup(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}
