//! CLI error type carrying the exit-code contract.
//!
//! Exit codes are stable for CI consumption: 0 success, 1 for failed
//! assertions or failures during a run, 2 for configuration and usage
//! errors (clap reports flag-level usage errors with code 2 on its own).

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// The configuration file, flag values, or their combination are
    /// invalid. Exit code 2.
    Config(String),
    /// A checked claim failed — evaluation counter mismatch, gradient
    /// error over threshold. Exit code 1.
    Assertion(String),
    /// The run itself failed: a core computation error, an unreadable
    /// artifact, or file I/O. Exit code 1.
    Runtime(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Assertion(_) | Error::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Assertion(msg) => write!(f, "assertion failed: {msg}"),
            Error::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<esmoe_core::Error> for Error {
    fn from(e: esmoe_core::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
