use std::fmt;
use std::path::Path;

pub const INVALID_ARGS: i32 = 2;
pub const IO: i32 = 3;
pub const NUMERICAL: i32 = 4;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn args(message: impl Into<String>) -> Self {
        CliError {
            code: INVALID_ARGS,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError {
            code: IO,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<protoreg::Error> for CliError {
    fn from(e: protoreg::Error) -> Self {
        let code = if e.is_io() {
            IO
        } else if e.is_numerical() {
            NUMERICAL
        } else {
            INVALID_ARGS
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
