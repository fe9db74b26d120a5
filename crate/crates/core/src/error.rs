use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("WAV data chunk is empty")]
    EmptyData,

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("bad weight file: {0}")]
    WeightFormat(String),

    #[error("weight file truncated: {0}")]
    Truncated(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward pass requires a training cache from the forward pass")]
    MissingCache,

    #[error("parameter update requested for a frozen conv stack")]
    FrozenUpdate,

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// True for errors caused by bad inputs or configuration, as opposed to
    /// failures while the computation was running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFinite(_) | Error::MissingCache | Error::Json(_)
        )
    }
}
