//! Command implementations behind the `ctts` binary.
//!
//! Each command writes its report to the given writer and returns a
//! [`CliError`] whose [`CliError::exit_code`] is the process exit status.

pub mod bench;
pub mod commands;

use thiserror::Error;

use ctts::modelfile::ModelFileError;
use ctts::pipeline::PipelineError;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for runtime and model errors.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for usage errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("model file: {0}")]
    Model(#[from] ModelFileError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let stage = e.stage();
        let message = match e {
            PipelineError::Frontend(inner) => inner.to_string(),
            PipelineError::Acoustic(inner) => inner.to_string(),
            PipelineError::Vocoder(inner) => inner.to_string(),
            PipelineError::Model(m) => m,
        };
        CliError::Stage { stage, message }
    }
}
