//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Failures raised by the numeric engine, the model and the data plumbing.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible array shapes; the message names both shapes.
    Dimension(String),
    /// A primitive produced NaN or Inf from finite inputs (overflow is an
    /// error, never propagated silently).
    NonFinite { op: &'static str },
    /// An API contract was violated (non-scalar loss, missing gradient,
    /// non-deterministic closure under a gradient check, ...).
    Contract(String),
    /// Inconsistent model or generator configuration.
    Config(String),
    /// Invalid runtime input (bad spot center, unknown gene name, ...).
    Input(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::NonFinite { op } => {
                write!(f, "non-finite value produced by `{op}` (overflow or invalid domain)")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
