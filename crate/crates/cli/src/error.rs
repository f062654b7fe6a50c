use std::fmt;

/// A failed command. Printed as one line: `hat: error[<kind>]: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    UnknownKey,
    TypeMismatch,
    InvalidConfig,
    MissingInput,
    Io,
    Data,
    Checkpoint,
    Runtime,
    SelftestFailed,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::UnknownKey => "unknown-key",
            ErrorKind::TypeMismatch => "type-mismatch",
            ErrorKind::InvalidConfig => "invalid-config",
            ErrorKind::MissingInput => "missing-input",
            ErrorKind::Io => "io",
            ErrorKind::Data => "data",
            ErrorKind::Checkpoint => "checkpoint",
            ErrorKind::Runtime => "runtime",
            ErrorKind::SelftestFailed => "selftest-failed",
        }
    }

    /// Process exit code: 2 for problems with the invocation itself.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage | ErrorKind::UnknownKey | ErrorKind::TypeMismatch | ErrorKind::InvalidConfig => 2,
            ErrorKind::MissingInput => 3,
            _ => 1,
        }
    }
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    /// The message collapsed onto a single line.
    pub fn line(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("hat: error[{}]: {msg}", self.kind.as_str())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

macro_rules! from_err {
    ($t:ty, $kind:expr) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e.to_string())
            }
        }
    };
}

from_err!(hat_core::DataError, ErrorKind::Data);
from_err!(hat_core::CheckpointError, ErrorKind::Checkpoint);
from_err!(hat_core::ModelError, ErrorKind::InvalidConfig);
from_err!(hat_core::TrainError, ErrorKind::Runtime);
from_err!(hat_core::EvalError, ErrorKind::Runtime);
from_err!(hat_core::SpectralError, ErrorKind::Runtime);

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new(ErrorKind::Io, format!("{}: {e}", path.display()))
}
