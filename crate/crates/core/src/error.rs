//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/model shape disagreement. Message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar or config field outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Bad runtime input (token ids, empty corpora, overlong sequences).
    #[error("invalid input: {0}")]
    Input(String),

    /// Incompatible artifacts wired together (model vs SAE vs vector dims).
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally valid input for which the operation has no answer
    /// (e.g. rescaling a zero vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Corrupt or incompatible artifact files: bad hash, version mismatch.
    #[error("format error: {0}")]
    Format(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 1 for anything caught by validation, 2 for runtime
    /// failures (I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
