use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the SLAM engine.
#[derive(Debug, Error)]
pub enum SlamError {
    /// A caller broke an operation's precondition (mismatched shapes, bad ordering, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("tracking lost: no Gaussian covers the frame")]
    TrackingLost,

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, SlamError>;

impl SlamError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SlamError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlamError::Io {
            path: path.into(),
            source,
        }
    }
}
