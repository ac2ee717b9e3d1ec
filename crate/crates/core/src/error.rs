use std::io;

use thiserror::Error;

pub type Result<T, E = ResomError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ResomError {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: expected {expected}, got {actual} ({context})")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of bounds for {context} of length {len}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error at line {line}: {message}")]
    FormatLine { line: usize, message: String },

    #[error("prediction failed: {0}")]
    Prediction(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transfer failed: {0}")]
    Transfer(String),

    #[error("remote node error: {0}")]
    Remote(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ResomError {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ResomError::Param(_) => "param",
            ResomError::Shape { .. } => "shape",
            ResomError::Index { .. } => "index",
            ResomError::Input(_) => "input",
            ResomError::Format { .. } | ResomError::FormatLine { .. } => "format",
            ResomError::Prediction(_) => "prediction",
            ResomError::Protocol(_) => "protocol",
            ResomError::Transfer(_) => "transfer",
            ResomError::Remote(_) => "remote",
            ResomError::Io(_) => "io",
            ResomError::Json(_) => "json",
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        ResomError::Param(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        ResomError::Input(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        ResomError::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(ResomError::Shape {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
