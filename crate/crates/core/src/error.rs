use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} outside [{min}, {max}]")]
    Range {
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration diverged at t = {t} min: {reason}")]
    Divergence { t: f64, reason: String },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ensemble failed for seeds {seeds:?}: {first}")]
    Ensemble { seeds: Vec<u64>, first: String },

    #[error("training aborted at epoch {epoch}, run {run}: {source}")]
    Training {
        epoch: usize,
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numbers or solver breakdown.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::Divergence { .. } | Error::Evaluation(_) => true,
            Error::Run { source, .. } | Error::Training { source, .. } => source.is_numeric(),
            Error::Ensemble { .. } => true,
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } | Error::Serde(_) => {
                true
            }
            Error::Run { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
