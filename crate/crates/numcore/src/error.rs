use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("NaN encountered in {0}")]
    NaN(&'static str),
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("function under check is not deterministic: {0}")]
    NonDeterministic(String),
    /// Failure raised by code layered on top of this crate.
    #[error("{0}")]
    External(String),
}

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NumError::Shape {
        op,
        detail: detail.into(),
    })
}
