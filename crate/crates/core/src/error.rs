use bvos_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op}: extents disagree: {detail}")]
    Extent { op: &'static str, detail: String },
    #[error("label {label} out of range (only {slots} slots)")]
    Label { label: u8, slots: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("file format: {0}")]
    Format(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn extent(op: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::Extent {
        op,
        detail: detail.into(),
    }
}
