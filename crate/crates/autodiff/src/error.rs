use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {reason}")]
    BadOperand { op: &'static str, reason: String },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("function evaluation failed: {0}")]
    Evaluation(String),
}
