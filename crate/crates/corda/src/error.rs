use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CordaError>;

#[derive(Debug, Error)]
pub enum CordaError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    /// Bad user-supplied configuration (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// On-disk data that does not match the dataset format.
    #[error("format error at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// An API precondition was violated (shape mismatch, out-of-range ids, NaN inputs).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training produced a non-finite loss (CLI exit code 1).
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NanLoss { iter: usize, detail: String },
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
}

impl CordaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CordaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CordaError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CordaError::Config(msg.into())
    }

    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CordaError::Config(_) => 2,
            _ => 1,
        }
    }
}
