use std::time::Duration;

use http::StatusCode;
use thiserror::Error;

/// Failures the proxy itself generates (as opposed to upstream error responses,
/// which are relayed untouched).
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProxyError {
    #[error("request timed out")]
    Timeout,
    #[error("upstream unreachable: {0}")]
    Unreachable(String),
    #[error("request queue is full")]
    QueueFull,
    #[error("no usable token in the pool")]
    PoolExhausted { retry_after: Option<Duration> },
    #[error("internal proxy error: {0}")]
    Internal(String),
}

impl ProxyError {
    /// Timeout, unreachable, queue-full and pool-exhausted each get their own 5xx status.
    pub fn status(&self) -> StatusCode {
        match self {
            ProxyError::Timeout => StatusCode::GATEWAY_TIMEOUT,
            ProxyError::Unreachable(_) => StatusCode::BAD_GATEWAY,
            ProxyError::QueueFull => StatusCode::SERVICE_UNAVAILABLE,
            ProxyError::PoolExhausted { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            ProxyError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Machine-readable value of the `proxy_error` body field.
    pub fn code(&self) -> &'static str {
        match self {
            ProxyError::Timeout => "timeout",
            ProxyError::Unreachable(_) => "upstream_unreachable",
            ProxyError::QueueFull => "queue_full",
            ProxyError::PoolExhausted { .. } => "pool_exhausted",
            ProxyError::Internal(_) => "internal",
        }
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({ "proxy_error": self.code(), "message": self.to_string() })
    }
}

/// Worker refused a request at enqueue time.
#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum EnqueueError {
    #[error("worker token is invalid")]
    Invalid,
}

/// Configuration could not be assembled from flags, environment and file.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("no access tokens given (use --tokens, GPS_TOKENS or a config file)")]
    NoTokens,
    #[error("invalid value `{value}` for {source_name}: {reason}")]
    Invalid { source_name: String, value: String, reason: String },
    #[error("config file line {line}: {reason}")]
    File { line: usize, reason: String },
    #[error("cannot read config file {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error(transparent)]
    Cli(#[from] clap::Error),
}

impl ConfigError {
    pub(crate) fn invalid(source_name: impl Into<String>, value: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { source_name: source_name.into(), value: value.into(), reason: reason.into() }
    }
}
