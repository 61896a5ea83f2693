use std::path::Path;

use udm::UdmError;

/// Failure class; decides the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, unreadable or malformed input. Exit code 1.
    Usage,
    /// The data were read but cannot be analysed. Exit code 2.
    DataQuality,
    /// An estimation step failed numerically. Exit code 3.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::DataQuality => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn quality(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::DataQuality,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }

    /// Prefix the message with the file it concerns.
    pub fn in_file(self, path: &Path) -> Self {
        CliError {
            kind: self.kind,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl From<UdmError> for CliError {
    fn from(e: UdmError) -> Self {
        let kind = match e {
            UdmError::InvalidParameter(_) | UdmError::InvalidSpec(_) => ErrorKind::Usage,
            UdmError::EmptySna | UdmError::UndefinedVariance | UdmError::InsufficientData(_) => ErrorKind::DataQuality,
            UdmError::IllConditioned(_)
            | UdmError::DegeneratePoles { .. }
            | UdmError::DegenerateModel(_)
            | UdmError::DegenerateDecomposition(_)
            | UdmError::Numeric(_)
            | UdmError::NonConverged { .. } => ErrorKind::Numeric,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::usage(e.to_string())
    }
}
