use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column \"{0}\"")]
    MissingColumn(String),

    #[error("validation error at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate time range: {0}")]
    DegenerateRange(String),

    #[error("knot degeneracy: {0}")]
    KnotDegeneracy(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {message} (jitter tried: {jitter:?})")]
    Numerical { message: String, jitter: Vec<f64> },

    #[error("chain failure at sweep {sweep}: {source}")]
    Chain {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("unknown subject id \"{0}\"")]
    UnknownSubject(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("replication invalid: {failed} of {n_reps} replicates failed")]
    ReplicationInvalid { failed: usize, n_reps: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, jitter: Vec<f64>) -> Self {
        Error::Numerical {
            message: message.into(),
            jitter,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that originate in the numerical core (Cholesky
    /// failures, chain aborts) as opposed to input problems.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } | Error::Chain { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl Error {
    /// Process exit code: 2 for configuration errors, 3 for I/O and input
    /// data errors, 4 for numerical and chain failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::MissingColumn(_)
            | Error::Row { .. }
            | Error::Validation(_)
            | Error::DegenerateRange(_)
            | Error::UnknownSubject(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
