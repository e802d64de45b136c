use thiserror::Error;

/// Errors produced by the fusion engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("configuration error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Setting(String),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::Shape {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
