//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a layer) disagree on shape.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty axis: {0}")]
    EmptyAxis(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was used outside of its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image decode failed: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// | code | meaning                                   |
    /// |------|-------------------------------------------|
    /// | 1    | other / internal                          |
    /// | 2    | configuration error                       |
    /// | 3    | data, I/O or checkpoint error             |
    /// | 4    | numeric error (non-finite values, etc.)   |
    /// | 5    | shape or index error                      |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Format(_)
            | Error::Version { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Shape { .. } | Error::EmptyAxis(_) | Error::Index(_) => 5,
            Error::Contract(_) => 1,
        }
    }
}
