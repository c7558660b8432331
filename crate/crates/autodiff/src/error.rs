use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn invalid<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Invalid {
        op,
        detail: detail.into(),
    })
}
