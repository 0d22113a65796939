use std::fmt;

use geoint_core::Error;

/// Failure of a CLI run, classified for the exit status.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; `key` points at the offending entry.
    Config { key: Option<String>, message: String },
    Solver(Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn config(key: Option<&str>, message: impl Into<String>) -> Self {
        CliError::Config { key: key.map(str::to_string), message: message.into() }
    }

    /// 2 for configuration errors, 3 for solver failures, 1 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { key: Some(key), message } => write!(f, "config error at key `{key}`: {message}"),
            CliError::Config { key: None, message } => write!(f, "config error: {message}"),
            CliError::Solver(e) => write!(f, "solver failure: {e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

/// Parameter-shaped library errors count as configuration errors; the rest
/// are solver failures.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { name, reason } => CliError::config(Some(name), reason),
            Error::UnknownKey { .. } | Error::RequiresSeparable(_) | Error::DimensionMismatch { .. } | Error::GeometryMismatch(_) => {
                CliError::config(None, e.to_string())
            }
            other => CliError::Solver(other),
        }
    }
}
