use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular to working precision (pivot {pivot:e})")]
    Singular { pivot: f64 },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not positive definite (diagonal {value:e} at index {index})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("innovation covariance is singular")]
    SingularInnovationCovariance,

    #[error("non-finite value produced in {0}")]
    NumericOverflow(&'static str),

    #[error("non-finite activation at sequence step {step}")]
    NonFiniteActivation { step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("simulation became unstable at step {step}")]
    UnstableSimulation { step: usize },

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("incompatible dataset: {0}")]
    IncompatibleDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training stalled: every sample in batch {batch} of epoch {epoch} was skipped")]
    TrainingStalled { epoch: usize, batch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code for the command-line tool: 2 validation, 3 numeric divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv { .. } => 4,
            Error::Singular { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::SingularInnovationCovariance
            | Error::NumericOverflow(_)
            | Error::NonFiniteActivation { .. }
            | Error::UnstableSimulation { .. }
            | Error::TrainingStalled { .. } => 3,
            _ => 2,
        }
    }
}
