use griffonforge_core::eval::BenchmarkError;
use griffonforge_core::expert::ExpertError;
use griffonforge_core::filters::FilterError;
use griffonforge_core::service::ServiceError;
use thiserror::Error;

/// Process exit codes. Frozen: scripts depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Other = 1,
    Schema = 2,
    Transport = 3,
    PortInUse = 4,
    BelowAccuracy = 5,
}

#[derive(Debug, Error)]
#[error("{msg}")]
pub struct CliError {
    pub exit: Exit,
    pub msg: String,
}

impl CliError {
    pub fn new(exit: Exit, msg: impl Into<String>) -> Self {
        Self {
            exit,
            msg: msg.into(),
        }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Self::new(Exit::Other, msg)
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Self::new(Exit::Schema, msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::SchemaViolation { .. } | FilterError::Lexicon { .. } => {
                Self::schema(e.to_string())
            }
            other => Self::other(other.to_string()),
        }
    }
}

impl From<BenchmarkError> for CliError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::SchemaViolation { .. } => Self::schema(e.to_string()),
            other => Self::other(other.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Schema { .. } => Self::schema(e.to_string()),
            other => Self::other(other.to_string()),
        }
    }
}

impl From<ExpertError> for CliError {
    fn from(e: ExpertError) -> Self {
        match e {
            ExpertError::Transport { .. } => Self::new(Exit::Transport, e.to_string()),
            other => Self::other(other.to_string()),
        }
    }
}
