use std::io;
use thiserror::Error;

/// Crate-wide error type. Persistence errors keep enough context to tell a
/// wrong file apart from a damaged one.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{context}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        context: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{context}: unsupported version {found}, expected {expected}")]
    VersionMismatch {
        context: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{context}: truncated file, {detail}")]
    Truncated {
        context: &'static str,
        detail: String,
    },

    #[error("{path}:{line}: {reason}")]
    ManifestLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate id {id} in {path}")]
    DuplicateId { path: String, id: u64 },

    #[error("{path}: {reason}")]
    ImageFormat { path: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
