//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A backend exists in the registry but cannot serve requests
    /// (e.g. the reference dual encoder without its weights).
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("unknown backend `{name}` for {kind}; known: {known}")]
    UnknownBackend {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("text has {len} tokens, exceeding the backend limit of {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite value produced mid-computation; carries diagnostics.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("no classification head attached")]
    MissingHead,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// CLI exit-code class: 1 for input/config errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownBackend { .. }
            | Error::TextTooLong { .. }
            | Error::ShapeMismatch(_)
            | Error::InvalidInput(_)
            | Error::Config(_)
            | Error::MissingHead
            | Error::CheckpointMismatch(_)
            | Error::CheckpointFormat(_)
            | Error::MissingArtifact(_) => 1,
            Error::BackendUnavailable(_)
            | Error::Divergence(_)
            | Error::Io(_)
            | Error::Serialization(_)
            | Error::Image(_) => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
