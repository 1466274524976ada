use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PainterError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PainterError {
    #[error("mask has no nonzero pixels")]
    EmptyMask,
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prompt has no actual tokens")]
    EmptyPrompt,
    #[error("missing control tap: {0}")]
    MissingTap(String),
    #[error("timestep out of range: {0}")]
    Range(String),
    #[error("schema error{}: {message}", record.as_ref().map(|r| format!(" in record `{r}`")).unwrap_or_default())]
    Schema {
        record: Option<String>,
        message: String,
    },
    #[error("client error{}: {message}", record.as_ref().map(|r| format!(" in record `{r}`")).unwrap_or_default())]
    Client {
        record: Option<String>,
        message: String,
    },
    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PainterError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PainterError::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        PainterError::Domain(msg.into())
    }

    pub fn schema(record: Option<&str>, message: impl Into<String>) -> Self {
        PainterError::Schema {
            record: record.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn client(message: impl Into<String>) -> Self {
        PainterError::Client {
            record: None,
            message: message.into(),
        }
    }

    /// Attach a record id to client and schema errors that lack one.
    pub fn with_record(self, id: &str) -> Self {
        match self {
            PainterError::Client {
                record: None,
                message,
            } => PainterError::Client {
                record: Some(id.to_owned()),
                message,
            },
            PainterError::Schema {
                record: None,
                message,
            } => PainterError::Schema {
                record: Some(id.to_owned()),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PainterError::Io {
            path: path.into(),
            source,
        }
    }
}
