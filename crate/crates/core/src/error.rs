use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("band `{0}` has no finite values")]
    EmptyBand(String),

    #[error("band `{0}` has zero variance")]
    ConstantBand(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("eligible pool of {available} unknowns cannot supply {requested} negatives")]
    PoolExhausted { available: usize, requested: usize },

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("bad magic number in {0}")]
    BadMagic(PathBuf),

    #[error("checksum mismatch in {path} ({section})")]
    Checksum { path: PathBuf, section: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by missing or corrupt input data rather than
    /// by configuration or programming mistakes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic(_)
                | Error::Checksum { .. }
                | Error::Truncated { .. }
                | Error::Malformed { .. }
                | Error::Csv(_)
                | Error::EmptyBand(_)
                | Error::PoolExhausted { .. }
        )
    }
}
