//! Top-level error type for the harness; everything funnels here so `main`
//! can print one diagnostic and pick the exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] qdual_core::model::ModelError),
    #[error(transparent)]
    Task(#[from] qdual_core::tasks::TaskError),
    #[error(transparent)]
    Train(#[from] qdual_core::training::TrainError),
    #[error(transparent)]
    Decode(#[from] qdual_core::decoding::DecodeError),
    #[error(transparent)]
    Analysis(#[from] qdual_core::analysis::AnalysisError),
}

impl CliError {
    /// Exit codes: 2 for usage/config problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
