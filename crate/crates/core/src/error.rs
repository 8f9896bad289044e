use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),

    #[error("timestep {t} outside {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("noise level {level} outside 1..={max}")]
    NoiseLevelOutOfRange { level: usize, max: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("sigma {sigma} too large at t={t}: 1 - alpha_bar(t-1) - sigma^2 < 0")]
    NegativeRadicand { t: usize, sigma: f64 },

    #[error("gradient scale must be finite and >= 0, got {0}")]
    InvalidScale(f64),

    #[error("non-finite loss {loss} at iteration {iteration}; lower the learning rate")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("labels contain a single class; AUROC needs positives and negatives")]
    SingleClass,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
