use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scatter to inactive coordinate {0:?}")]
    InactiveCoord((i64, i64)),

    #[error("stride mismatch: expected {expected}, got {got}")]
    Stride { expected: u32, got: u32 },

    #[error("malformed point file: length {len} bytes is not a multiple of 16 (offset {offset})")]
    PointFile { len: u64, offset: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
