use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("staleness error: sample id {0} is not in the feature pool")]
    Staleness(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, missing
    /// files) rather than failures during a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Io { .. } | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
