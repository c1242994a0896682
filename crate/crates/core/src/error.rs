use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrsError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("sequence must contain at least one token")]
    EmptySequence,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParams(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("matrix is empty")]
    EmptyMatrix,

    #[error("calibration did not converge after {iterations} iterations (residual {residual:e})")]
    Calibration { iterations: usize, residual: f64 },

    #[error("row {row} has no unmasked entries")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value produced in stage {0}")]
    NonFinite(String),

    #[error("unknown stage tag: {0}")]
    UnknownStage(String),

    #[error("unknown variant tag: {0}")]
    UnknownVariant(String),

    #[error("invalid probe configuration: {0}")]
    InvalidProbe(String),

    #[error("invalid config: {0}")]
    Config(String),
}
