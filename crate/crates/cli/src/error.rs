use thiserror::Error;

use trajret_annotate::AnnotateError;
use trajret_core::context::ContextError;
use trajret_core::engine::EngineError;
use trajret_core::eval::EvalError;
use trajret_core::pairs::{ExtractError, PoolError, SplitError};
use trajret_core::trajectory::IngestError;

/// Failures split by exit code: 1 for user errors (bad flags, bad config,
/// missing inputs), 2 for data that fails an integrity check.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Integrity(_) => 2,
        }
    }

    pub fn user(message: impl Into<String>) -> Self {
        CliError::User(message.into())
    }

    pub fn integrity(message: impl Into<String>) -> Self {
        CliError::Integrity(message.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } | IngestError::ManifestCount { .. } => CliError::User(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        CliError::Integrity(e.to_string())
    }
}

impl From<PoolError> for CliError {
    fn from(e: PoolError) -> Self {
        CliError::Integrity(e.to_string())
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<ContextError> for CliError {
    fn from(e: ContextError) -> Self {
        CliError::Integrity(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Temperature(_)
            | EngineError::SubBatch { .. }
            | EngineError::EmptyTrainSplit
            | EngineError::Config(_)
            | EngineError::Io(_) => CliError::User(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::User(e.to_string()),
            EvalError::Engine(inner) => inner.into(),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Precondition(_) | AnnotateError::Content { .. } => CliError::Integrity(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}
