use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape specification that violates its family's arity or ranges.
    #[error("invalid shape specification: {0}")]
    Spec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash mismatch: file has {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },
    /// Non-finite loss or gradient during training.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
