use std::path::PathBuf;

use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("case {0} not found")]
    NotFound(Uuid),
    #[error("case {0} has not been reviewed")]
    NoReview(Uuid),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("payload exceeds the {0} byte limit")]
    PayloadTooLarge(usize),
    #[error("job failed: {0}")]
    JobFailed(String),
    #[error("record {path} is unreadable: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("illegal job transition {from} -> {to}")]
    Transition { from: &'static str, to: &'static str },
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pipeline(#[from] drscreen_core::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
