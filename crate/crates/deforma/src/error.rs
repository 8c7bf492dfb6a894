//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("index {index} out of range (len {len}) for {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid value for {what}: {detail}")]
    InvalidValue { what: &'static str, detail: String },
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("malformed header in {what}: {detail}")]
    MalformedHeader { what: &'static str, detail: String },
    #[error("truncated payload in {what}: expected {expected} bytes, got {got}")]
    TruncatedPayload {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient requested for a value not recorded on the tape")]
    UnrecordedValue,
    #[error("all losses are disabled")]
    AllLossesDisabled,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
