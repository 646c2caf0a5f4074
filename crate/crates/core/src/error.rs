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

    #[error("manifest schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("validation error{}: {message}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("region {window:?} lies outside the {width}x{height} frame")]
    Bounds {
        window: (u32, u32, u32, u32),
        width: u32,
        height: u32,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("could not decode media: {0}")]
    Decode(String),

    #[error("missing weights file: expected {0}")]
    MissingWeights(PathBuf),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Validation {
            row: None,
            message: message.into(),
        }
    }

    pub fn invalid_row(row: usize, message: impl Into<String>) -> Self {
        Error::Validation {
            row: Some(row),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Decode(e.to_string())
    }
}
