use std::path::PathBuf;

use thiserror::Error;

use crate::layout::LayoutError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("layout validation failed: {0}")]
    Layout(#[from] LayoutError),
    #[error("schema error in {field}: {message}")]
    Schema { field: String, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument {name}: {message}")]
    InvalidArgument { name: String, message: String },
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name: name.into(),
            message: message.into(),
        }
    }
}
