use thiserror::Error;

/// Failures mapped to the process exit codes: 2 usage, 3 data or format,
/// 4 numerical divergence.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<widthlab::dataset::DataError> for CliError {
    fn from(e: widthlab::dataset::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<widthlab::trainer::RunError> for CliError {
    fn from(e: widthlab::trainer::RunError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
