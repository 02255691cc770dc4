use thiserror::Error;

/// Errors surfaced by the library's fallible operations.
///
/// Shape violations inside the tensor tape are programming errors and panic
/// with a message naming the op and both shapes; everything that can fail on
/// user-supplied data or configuration goes through this enum.
#[derive(Debug, Error)]
pub enum QfeError {
    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QfeError>;
