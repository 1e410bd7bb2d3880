use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Malformed or truncated pixmap data.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// The peer sent something the engine refuses to accept. `raw` keeps the
    /// offending payload for diagnosis when one is available.
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: Option<String> },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>, raw: Option<String>) -> Self {
        Error::Protocol {
            message: msg.into(),
            raw,
        }
    }

    /// True for failures caused by the backend or its transport rather than
    /// by the caller's inputs.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, Error::Protocol { .. } | Error::BackendUnavailable(_))
    }
}
