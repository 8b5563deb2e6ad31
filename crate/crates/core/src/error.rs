use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    Format(String),

    /// Otsu thresholding needs at least two occupied histogram bins.
    #[error("degenerate histogram: volume has no air/tissue contrast")]
    DegenerateHistogram,

    #[error("training diverged (non-finite loss) at epoch {epoch}, iter {iter}: {detail}")]
    Diverged {
        epoch: usize,
        iter: usize,
        detail: String,
    },

    #[error("stratification impossible: {0}")]
    Stratification(String),

    #[error("leakage: {0}")]
    Leakage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
