use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmarcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmarcError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("mask is not binary in {op}: found value {value} at flat index {index}")]
    NonBinaryMask {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },
}

impl SmarcError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        SmarcError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        SmarcError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmarcError::Io {
            path: path.into(),
            source,
        }
    }
}
