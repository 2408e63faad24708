use thiserror::Error;

/// Errors raised by the memory, search, task and learner layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("value {value} out of range for {width} base-4 digits")]
    OutOfRange { value: u64, width: usize },

    #[error("malformed corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },

    #[error("not a snapshot: magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),

    #[error("snapshot holds payload kind {found}, expected {expected}")]
    WrongKind { expected: u8, found: u8 },

    #[error("snapshot truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("corrupt snapshot: {0}")]
    Corrupt(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
