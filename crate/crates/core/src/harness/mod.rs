//! Training, evaluation, checkpoints and the command-line front end.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{EvalSpec, TaskSpec, TrainConfig};
pub use train::{evaluate, train, EvalRecord, TrainOutcome};

use thiserror::Error;

/// Exit code for usage, configuration and input-format problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for non-finite values during training.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] crate::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("invalid JSON in {context}: {source}")]
    Json { context: String, source: serde_json::Error },
    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFinite { step: usize, dump: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NonFinite { .. } | HarnessError::Model(crate::Error::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Io { context, source }
    }

    pub(crate) fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Json { context, source }
    }
}
