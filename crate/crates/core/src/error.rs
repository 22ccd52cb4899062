use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("weight file: bad magic (expected \"C3AE\")")]
    BadMagic,

    #[error("weight file: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("{0}: truncated stream")]
    Truncated(&'static str),

    #[error("weight file: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed graph description: {0}")]
    GraphDescription(String),

    #[error("ppm: bad magic {0:?}")]
    PpmMagic(String),

    #[error("ppm: unsupported format {0} (only binary P6 is supported)")]
    PpmUnsupported(String),

    #[error("ppm: unsupported maxval {0} (expected 255)")]
    PpmMaxval(u32),

    #[error("ppm: malformed header: {0}")]
    PpmHeader(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
