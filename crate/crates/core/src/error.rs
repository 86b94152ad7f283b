use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invariant { what: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: i64, num_classes: usize },

    #[error("crop {crop:?} does not fit inside a {width}x{height} image")]
    CropOutOfBounds {
        crop: [f64; 4],
        width: usize,
        height: usize,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing array `{0}` in tensor container")]
    MissingArray(String),

    #[error("fingerprint mismatch: artifact has {found}, requested {expected}")]
    Fingerprint { found: String, expected: String },

    #[error("missing pseudo labels for target sample {0}")]
    MissingPseudoLabels(String),

    #[error("non-finite loss at iteration {iteration} (source batch {source_ids:?}, target batch {target_ids:?})")]
    NonFiniteLoss {
        iteration: usize,
        source_ids: Vec<String>,
        target_ids: Vec<String>,
    },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invariant {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
