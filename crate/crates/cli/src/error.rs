use rora_core::CoreError;
use thiserror::Error;

/// CLI failures, classified for exit codes: 1 validation, 2 numeric, 3 I/O.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match &e {
            CoreError::Dimension { .. }
            | CoreError::InvalidArgument(_)
            | CoreError::Snapshot(_) => CliError::Validation(e.to_string()),
            CoreError::NonFinite { .. } | CoreError::Training { .. } => {
                CliError::Numeric(e.to_string())
            }
            CoreError::SweepCell { source, .. } => match source.as_ref() {
                CoreError::Io(_) => CliError::Io(e.to_string()),
                CoreError::Dimension { .. } | CoreError::InvalidArgument(_) => {
                    CliError::Validation(e.to_string())
                }
                _ => CliError::Numeric(e.to_string()),
            },
            CoreError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}
