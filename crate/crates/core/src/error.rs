use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no circular information field found")]
    FieldDetection,
    #[error("optic disc not found")]
    DiscMissing,
    #[error("agreement is degenerate: expected weighted disagreement is zero")]
    DegenerateAgreement,
    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
