//! Harness error type and process exit-code mapping.

use commin_core::CoreError;

/// Anything that can go wrong while running an experiment.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Unparseable, inconsistent, or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A required checkpoint or dataset artifact is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A checkpoint exists but cannot be used.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset files that fail to decode or have the wrong shape.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 1 config, 2 missing artifact, 3 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::MissingArtifact(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
