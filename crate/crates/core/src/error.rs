use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("singular scatter matrix: {0}")]
    Singular(String),

    #[error("pgm: bad magic number {0:?}")]
    BadMagic(String),

    #[error("pgm: maxval must be in 1..=65535, got {0}")]
    BadMaxval(u32),

    #[error("unexpected EOF: {0}")]
    UnexpectedEof(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("cifar: file length {0} is not a multiple of 3074")]
    CifarLength(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad or missing input data rather than
    /// by the numerics or by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::BadMaxval(_)
                | Error::UnexpectedEof(_)
                | Error::Header(_)
                | Error::CifarLength(_)
                | Error::Checkpoint(_)
                | Error::Dataset(_)
                | Error::Io { .. }
                | Error::Csv(_)
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Singular(_))
    }
}
