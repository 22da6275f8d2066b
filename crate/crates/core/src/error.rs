use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the on-disk formats (sequences, grid dumps, checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: missing file", path.display())]
    MissingFile { path: PathBuf },
    #[error("{}: bad magic (expected {expected:?})", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{}: unexpected end of file", path.display())]
    UnexpectedEof { path: PathBuf },
    #[error("{}: unsupported version {found} (expected {expected})", path.display())]
    Version { path: PathBuf, expected: u32, found: u32 },
    #[error("{}: count mismatch: expected {expected}, found {found}", path.display())]
    CountMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{}: invalid content: {msg}", path.display())]
    Invalid { path: PathBuf, msg: String },
}

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, counts).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no near-field points within {radius} m")]
    NoNearFieldPoints { radius: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
