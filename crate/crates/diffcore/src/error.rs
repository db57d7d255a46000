use thiserror::Error;

/// Errors raised by array construction, tape operations and the optimizer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("adam step counter overflow")]
    StepOverflow,

    #[error("gradient check: function value is not finite ({0})")]
    NonFinite(f64),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
