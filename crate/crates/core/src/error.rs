use thiserror::Error;

/// Errors produced by the protocol engines, the authority service and the
/// client agent.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("parameter generation failed after {attempts} attempts: {what}")]
    GenerationFailed { what: &'static str, attempts: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty protocol input after deduplication")]
    EmptyInput,

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("request carries {len} elements, limit is {max}")]
    LimitExceeded { len: usize, max: usize },

    #[error("stale epoch {got:?}, current epoch is {current:?}")]
    StaleEpoch { got: String, current: String },

    #[error("element #{index} has no authority signature")]
    UnauthorizedElement { index: usize },

    #[error("signature does not verify")]
    InvalidSignature,

    #[error("authority unreachable, retry later: {0}")]
    RetryLater(String),

    #[error("network failure: {0}")]
    Network(String),

    #[error("feedback report rejected: {0}")]
    RejectedReport(String),

    #[error("query rate limit reached, retry later")]
    RateLimited,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable kind, used on the wire for error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "invalid_params",
            Error::GenerationFailed { .. } => "generation_failed",
            Error::Precondition(_) => "precondition",
            Error::EmptyInput => "empty_input",
            Error::ProtocolViolation(_) => "protocol_violation",
            Error::LimitExceeded { .. } => "limit_exceeded",
            Error::StaleEpoch { .. } => "stale_epoch",
            Error::UnauthorizedElement { .. } => "unauthorized_element",
            Error::InvalidSignature => "invalid_signature",
            Error::RetryLater(_) => "retry_later",
            Error::Network(_) => "network",
            Error::RejectedReport(_) => "rejected_report",
            Error::RateLimited => "rate_limited",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
