use std::io;

use harmoniad::evalio::ContainerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// Process exit status: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<harmoniad::Error> for CliError {
    fn from(e: harmoniad::Error) -> Self {
        use harmoniad::Error as E;
        match e {
            E::Config(_) | E::Shape(_) | E::EmptyDimension(_) => CliError::Config(e.to_string()),
            E::Io(_) | E::Container(_) => CliError::Io(e.to_string()),
            E::NonFinite(_) | E::ImaginaryResidue { .. } | E::Metric(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
