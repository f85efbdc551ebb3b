use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the survey pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// The backend produced a line that does not follow the wire protocol.
    #[error("protocol error: {message} (offending line: {line:?})")]
    Protocol { message: String, line: String },

    /// The backend could not be started or failed its handshake.
    #[error("backend error: {0}")]
    Backend(String),

    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),

    /// A pipeline stage was requested before the stages it depends on.
    #[error("stage `{stage}` requires `{missing}` to have completed first")]
    StageOrder { stage: String, missing: String },
}

/// Imagery provider failures, split so the CLI can give retry guidance.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider rejected the API key: {0}")]
    Auth(String),
    #[error("provider quota exhausted: {0}")]
    Quota(String),
    #[error("provider request failed: {0}")]
    Request(String),
    #[error("resource not available from provider: {0}")]
    NotFound(String),
}

impl Error {
    /// Process exit status for the CLI: 2 configuration or usage, 3 backend,
    /// 4 provider, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StageOrder { .. } => 2,
            Error::Backend(_) | Error::Protocol { .. } => 3,
            Error::Provider(_) => 4,
            Error::Domain(_) | Error::Io { .. } | Error::Json { .. } => 1,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
