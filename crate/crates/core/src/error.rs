use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the EGFL pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected} values, got {actual}")]
    InputShape { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("oracle diverged at step {step}: objective {value}")]
    OracleDivergence { step: usize, value: f64 },

    #[error("recall is undefined without positive labels")]
    UndefinedRecall,

    #[error("matrix is not column-stochastic: {0}")]
    NonStochastic(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("client (bs {bs}, slice {slice}): {source}")]
    Client {
        bs: usize,
        slice: usize,
        #[source]
        source: Box<Error>,
    },

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

    /// True for failures of the numerical machinery rather than of inputs or IO.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericOverflow { .. }
            | Error::Numeric(_)
            | Error::OracleDivergence { .. }
            | Error::UndefinedRecall
            | Error::NonStochastic(_) => true,
            Error::Client { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
