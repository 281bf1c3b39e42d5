use thiserror::Error;

/// Errors produced anywhere in the inference pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("{n} samples cannot be split into {folds} equal contiguous folds")]
    Divisibility { n: usize, folds: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fold {fold} has {size} samples; at least 2 are required for a covariance")]
    DegenerateFold { fold: usize, size: usize },

    #[error("every coordinate has variance at or below the floor {floor:e}")]
    EmptyProblem { floor: f64 },

    #[error("need at least two candidates to form loss differences")]
    EmptyDifference,

    #[error("matrix is not positive semi-definite even with jitter {max_jitter:e}")]
    Indefinite { max_jitter: f64 },

    #[error("lasso did not converge after {iterations} sweeps (last max update {last_update:e})")]
    NonConvergence { iterations: usize, last_update: f64 },

    #[error("learner {model} failed on fold {fold}: {source}")]
    Learner {
        fold: usize,
        model: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("hold-out size {0} must be even and at least 2")]
    Parity(usize),

    #[error("unsupported generator: {0}")]
    UnsupportedGenerator(String),

    #[error("degenerate scaling fit: {0}")]
    DegenerateFit(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
