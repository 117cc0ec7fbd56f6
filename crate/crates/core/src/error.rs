use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("landmark detection failed for {landmark}: best score {score:.3} below threshold {threshold:.3}")]
    DetectionFailure {
        landmark: &'static str,
        score: f64,
        threshold: f64,
    },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("metrics undefined: {0}")]
    UndefinedMetrics(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::EmptyCloud(_) => "empty_cloud",
            Error::Parse { .. } => "parse",
            Error::DetectionFailure { .. } => "detection_failure",
            Error::Degenerate(_) => "degenerate",
            Error::UndefinedMetrics(_) => "undefined_metrics",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}
