use std::path::Path;

use cqc_core::Error as CoreError;

/// Failures grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    /// Wraps a core error with the stage it came from.
    pub fn core(context: &str, e: CoreError) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            CoreError::InvalidArgument(_) | CoreError::Json(_) => CliError::Config(msg),
            CoreError::NonFinite(_)
            | CoreError::NonConvergence { .. }
            | CoreError::InvalidPropensity(_)
            | CoreError::FeatureNorm { .. } => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait Context<T> {
    fn ctx(self, context: &str) -> CliResult<T>;
}

impl<T> Context<T> for cqc_core::Result<T> {
    fn ctx(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::core(context, e))
    }
}
