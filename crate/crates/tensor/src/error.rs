use crate::scalar::DType;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid attribute for {op}: {detail}")]
    InvalidAttr { op: &'static str, detail: String },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: DType, found: DType },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor is detached from this tape")]
    DetachedTensor,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn attr_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidAttr {
        op,
        detail: detail.into(),
    }
}
