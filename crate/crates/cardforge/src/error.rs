//! Crate-wide error type and result alias.

use std::fmt;

#[derive(Debug)]
pub enum CardError {
    /// CSV ingestion failure; carries the 1-based line number when known.
    Csv { line: Option<u64>, msg: String },
    /// Query text rejected; `pos` is the byte offset of the offending token.
    Parse { pos: usize, msg: String },
    /// DNF expansion exceeded the term cap. Callers may retry with the
    /// union-bound flag (see `bn::SelectivityOpts`).
    DnfBlowup { terms: usize, max_terms: usize },
    UnknownColumn { table: String, column: String },
    /// Model validation / health-check failure; names the failed check.
    Model(String),
    /// Model store I/O or layout problem.
    Store(String),
    /// Serialization format problem (bad magic, version, truncation).
    Format(String),
    /// Precondition violation on an operation's inputs.
    Invalid(String),
    /// Training produced a non-finite loss.
    Diverged(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, CardError>;

impl fmt::Display for CardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CardError::Csv { line: Some(n), msg } => write!(f, "csv error at line {n}: {msg}"),
            CardError::Csv { line: None, msg } => write!(f, "csv error: {msg}"),
            CardError::Parse { pos, msg } => write!(f, "parse error at position {pos}: {msg}"),
            CardError::DnfBlowup { terms, max_terms } => {
                write!(
                    f,
                    "DNF blowup: {terms} terms exceed cap {max_terms} \
                     (fallback: request the union upper bound)"
                )
            }
            CardError::UnknownColumn { table, column } => {
                write!(f, "unknown column {table}.{column}")
            }
            CardError::Model(msg) => write!(f, "model check failed: {msg}"),
            CardError::Store(msg) => write!(f, "model store error: {msg}"),
            CardError::Format(msg) => write!(f, "format error: {msg}"),
            CardError::Invalid(msg) => write!(f, "{msg}"),
            CardError::Diverged(msg) => write!(f, "diverged: {msg}"),
            CardError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CardError {}

impl From<std::io::Error> for CardError {
    fn from(e: std::io::Error) -> Self {
        CardError::Io(e)
    }
}

impl From<serde_json::Error> for CardError {
    fn from(e: serde_json::Error) -> Self {
        CardError::Format(e.to_string())
    }
}
