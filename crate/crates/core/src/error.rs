use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prompt slot '{slot}' references unresolved placeholder {placeholder}")]
    UnresolvedPlaceholder { slot: String, placeholder: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("remote backend timed out after {retries} retries: {msg}")]
    RemoteTimeout { retries: usize, msg: String },
    #[error("remote backend returned status {status} after {retries} retries: {msg}")]
    RemoteStatus {
        status: u16,
        retries: usize,
        msg: String,
    },
    #[error("remote backend sent a malformed body: {0}")]
    RemoteMalformed(String),
    #[error("remote backend transport error after {retries} retries: {msg}")]
    RemoteTransport { retries: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config validation failed: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::InvalidData(_) => "invalid_data",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::UnresolvedPlaceholder { .. } => "unresolved_placeholder",
            Error::NonFinite(_) => "non_finite",
            Error::Unsupported(_) => "unsupported",
            Error::RemoteTimeout { .. } => "remote_timeout",
            Error::RemoteStatus { .. } => "remote_status",
            Error::RemoteMalformed(_) => "remote_malformed",
            Error::RemoteTransport { .. } => "remote_transport",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
