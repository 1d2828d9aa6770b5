use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WsdlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WsdlError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("empty foreground")]
    EmptyForeground,

    #[error("missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WsdlError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        WsdlError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WsdlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        WsdlError::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
