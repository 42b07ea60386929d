use thiserror::Error;

use crate::model::GaussianId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gaussian {id}: {reason}")]
    Parameter { id: GaussianId, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("finite-difference oracle: non-finite forward value at coordinate {coordinate}")]
    Oracle { coordinate: usize },

    #[error("pruning would remove every gaussian ({count} before pruning)")]
    DegenerateScene { count: usize },

    #[error("non-finite loss at iteration {iteration}: {diagnostic}")]
    NonFiniteLoss { iteration: usize, diagnostic: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
