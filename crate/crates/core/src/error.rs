use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient flowing out of op `{op}`")]
    NonFiniteGrad { op: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("`{operation}` is not supported for operator kind `{kind}`")]
    UnsupportedOperator {
        operation: &'static str,
        kind: &'static str,
    },

    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepRange { t: usize, t_max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sample variance is zero")]
    ZeroVariance,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
