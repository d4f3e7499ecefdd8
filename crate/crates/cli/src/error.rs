//! Command-level errors mapped onto process exit codes.

use std::fmt;

/// Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric failure, 4 compatibility.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Io(String),
    Numeric(String),
    Compat(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Io(_) => 2,
            CmdError::Numeric(_) => 3,
            CmdError::Compat(_) => 4,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Usage(m) => write!(f, "usage error: {m}"),
            CmdError::Io(m) => write!(f, "i/o error: {m}"),
            CmdError::Numeric(m) => write!(f, "numeric error: {m}"),
            CmdError::Compat(m) => write!(f, "compatibility error: {m}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<m2ost_core::Error> for CmdError {
    fn from(e: m2ost_core::Error) -> Self {
        use m2ost_core::Error::*;
        match &e {
            Config(_) | Input(_) => CmdError::Usage(e.to_string()),
            NonFinite { .. } | Contract(_) | Dimension(_) => CmdError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Io(e.to_string())
    }
}

pub type CmdResult<T> = Result<T, CmdError>;
