use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter, estimate or intermediate became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The theorem gives no guarantee for a scheme outside the box.
    #[error("scheme outside the [u, p_gn] box at index {index}: p={p}, u={u}, p_gn={pgn}")]
    OutsideBox { index: usize, p: f64, u: f64, pgn: f64 },

    #[error("malformed IDX data at byte {offset}: {msg}")]
    Idx { offset: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}
