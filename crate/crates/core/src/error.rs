use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),

    #[error("column `{column}` must be 0/1, found `{value}` on row {row}")]
    NonBinary {
        column: String,
        row: usize,
        value: String,
    },

    #[error("cannot parse `{value}` in column `{column}` on row {row} as a number")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input data: {0}")]
    InvalidData(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("weak identification: {0}")]
    WeakIdentification(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("model does not match data: {0}")]
    ModelMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("model encoding: {0}")]
    Encoding(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) => ErrorKind::Validation,
            Error::WeakIdentification(_) | Error::RankDeficient(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Numerical,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
