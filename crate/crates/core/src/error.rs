use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the tracker library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid attention mask: row {row} has no visible entry")]
    InvalidMask { row: usize },

    #[error("{table} id {id} at index {index} is out of range (size {size})")]
    IdOutOfRange {
        table: &'static str,
        index: usize,
        id: usize,
        size: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite loss {value} at step {step} (batch {batch})")]
    NonFinite { step: usize, batch: usize, value: f64 },

    #[error("invalid reuse spec: {0}")]
    InvalidReuse(String),

    #[error("parse error at line {line} (dialogue {dialogue_id}): {message}")]
    Parse {
        line: usize,
        dialogue_id: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
