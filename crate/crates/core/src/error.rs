//! Crate-wide error types.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by index construction, retrieval, the agent loop, and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model backend call failed.
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    /// Tree construction failed; the message names the offending node.
    #[error("index build error: {0}")]
    Build(String),

    /// A prompt template placeholder had no input to substitute.
    #[error("prompt render error: {0}")]
    Render(String),

    /// An operation was invoked in a state its contract forbids.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A memory operation was denied while the pipeline runs in strict mode.
    #[error("memory access denied: {agent} {op} on {level}")]
    MemoryDenied {
        agent: String,
        level: String,
        op: String,
    },

    /// Persisted file carries a format version this build cannot read.
    #[error("unsupported format version {found} (supported up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    /// Persisted file failed structural validation or decoding.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// Failures from a model backend, kept distinct so callers can branch on
/// transport vs. protocol problems.
#[derive(Debug, Error)]
pub enum BackendError {
    /// The request did not complete within the configured timeout.
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    /// Transport-level failure (connection refused, DNS, TLS, ...).
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { detail: String, attempts: u32 },

    /// The server answered with a non-success HTTP status.
    #[error("http status {status} after {attempts} attempt(s)")]
    Http { status: u16, attempts: u32 },

    /// The reply arrived but did not match the expected schema.
    #[error("malformed reply: {detail}")]
    Malformed { detail: String },
}

impl Error {
    /// Shorthand for an invalid-input error.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
