//! Shared error type for the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model not identifiable: {0}")]
    Identifiability(String),

    #[error("label out of range: {0}")]
    Label(String),

    #[error("stale forward cache: {0}")]
    Cache(String),

    #[error("wrong model mode: {0}")]
    Mode(String),

    #[error("unresolved id: {0}")]
    Lookup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
