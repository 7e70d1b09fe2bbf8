use std::path::PathBuf;

/// Errors produced by the rate-control stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("trace {}: {msg}", path.display())]
    TraceFormat { path: PathBuf, msg: String },

    #[error("trace frame {frame}: column `{column}`: {msg}")]
    TraceValidation {
        frame: usize,
        column: &'static str,
        msg: String,
    },

    #[error("frame index {index} out of range for a plant with {len} frames")]
    FrameOutOfRange { index: usize, len: usize },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight file: tensor `{tensor}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged: non-finite loss (sequence seed {seed}, window start {window_start})")]
    Diverged { seed: u64, window_start: usize },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("frame log: {0}")]
    FrameLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.into(),
        reason: reason.into(),
    }
}
