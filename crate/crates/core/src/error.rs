use thiserror::Error;

/// Errors from the numeric core. Contract violations that indicate a
/// programming bug (mismatched tape, wrong tensor rank inside a model)
/// panic instead; these variants cover conditions reachable from valid
/// user input or data.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("symbol vector has odd real length {0}; complex packing needs an even count")]
    OddRealLength(usize),

    #[error("cannot power-normalize an all-zero symbol vector")]
    ZeroSignal,

    #[error("noise variance must be finite and non-negative, got {0}")]
    InvalidNoiseVariance(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestep {t} outside schedule range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step}: loss {loss} is not finite")]
    Diverged { step: usize, loss: f64 },
}

impl CoreError {
    pub fn shape_mismatch(expected: impl Into<String>, actual: impl std::fmt::Debug) -> Self {
        CoreError::ShapeMismatch {
            expected: expected.into(),
            actual: format!("{actual:?}"),
        }
    }
}
