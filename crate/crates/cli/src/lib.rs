//! Command implementations behind the `emomod` binary.
//!
//! Every command is a plain function returning a serializable summary, so
//! the binary is a thin argument parser and the commands are testable
//! in-process.

pub mod commands;
pub mod config;

use std::fmt;

use emomod_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_USAGE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 10;

/// A failure with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISSING, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISMATCH, message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Missing(_) => EXIT_MISSING,
            Error::Incompatible(_) => EXIT_MISMATCH,
            Error::UnknownEmotion { .. } | Error::Config(_) | Error::Range(_) => EXIT_USAGE,
            // Unreadable or corrupt artifacts are reported as I/O failures.
            Error::Io { .. }
            | Error::Version { .. }
            | Error::BlobTable(_)
            | Error::BlobShape { .. }
            | Error::Truncated { .. }
            | Error::Manifest(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_IO,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::io(e.to_string())
    }
}
