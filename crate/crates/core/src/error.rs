use std::fmt;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("JSON parse error at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("malformed tree: {0}")]
    Structure(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::Invalid(msg.to_string())
    }

    pub(crate) fn structure(msg: impl fmt::Display) -> Self {
        Error::Structure(msg.to_string())
    }

    /// Converts a serde_json error into a byte-offset error for the given input.
    pub(crate) fn from_json(err: serde_json::Error, input: &str) -> Self {
        let offset = byte_offset(input, err.line(), err.column());
        Error::Json {
            offset,
            message: err.to_string(),
        }
    }
}

fn byte_offset(input: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (idx, l) in input.split_inclusive('\n').enumerate() {
        if idx + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    offset
}
