use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// A required file is missing or unreadable.
    Io { path: PathBuf, message: String },
    /// A file parsed but its contents are malformed (row index is 1-based).
    Format { path: PathBuf, row: Option<usize>, message: String },
    /// Inputs violate a documented invariant.
    Validation(String),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// A configuration is inconsistent or infeasible.
    Config(String),
    /// Non-finite values surfaced during numeric computation.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, message } => write!(f, "io error for {}: {}", path.display(), message),
            Error::Format { path, row, message } => match row {
                Some(r) => write!(f, "format error in {} at row {}: {}", path.display(), r, message),
                None => write!(f, "format error in {}: {}", path.display(), message),
            },
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
