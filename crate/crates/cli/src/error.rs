use msegnn::metatrain::MetaError;
use msegnn::{DataError, MetricError, ModelError};
use thiserror::Error;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 1 configuration, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) | DataError::Sampling(_) => CliError::Config(e.to_string()),
            DataError::Parse { .. } | DataError::Validation { .. } | DataError::Io(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            MetaError::Data(d) => d.into(),
            MetaError::Model(m) => m.into(),
            MetaError::Episode { source, .. } => (*source).into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
