use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("model digest mismatch: stream was encoded with {expected}, weights are {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Error {
    Error::Shape { op, dim, expected, got }
}
