use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point at or behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("initialization failed: {0}")]
    InitFailure(String),

    #[error("non-finite loss at iteration {iteration} ({stage})")]
    NonFinite { stage: &'static str, iteration: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("external matcher failed: {0}")]
    Matcher(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
