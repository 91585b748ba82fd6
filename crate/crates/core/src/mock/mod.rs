//! Offline stand-in for the GitHub API.
//!
//! Enforces per-token hourly budgets (scaled down for tests), reports them in
//! `x-ratelimit-*` headers, answers 401 for unknown tokens and flags any two
//! overlapping calls on one token as abuse. Every call lands in a ledger that
//! the tests use as their oracle.

pub mod latency;
pub mod ledger;
mod server;

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use latency::{LatencyClass, LatencyProfile};
pub use ledger::{CallRecord, LedgerReport, TokenReport};
pub use server::{synthetic_body, MockUpstream, ABUSE_MESSAGE};

use crate::scheduler::budget::{ANONYMOUS_HOURLY_LIMIT, AUTHENTICATED_HOURLY_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub tokens: Vec<String>,
    /// Per-token REST budget per window.
    pub limit: u64,
    /// Per-token GraphQL budget per window; defaults to `limit`.
    pub graphql_limit: Option<u64>,
    pub anonymous_limit: u64,
    pub window_secs: f64,
    /// Value of `retry-after` on abuse responses.
    pub abuse_retry_after_secs: u64,
    pub latency: LatencyProfile,
    pub port: u16,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            limit: 50,
            graphql_limit: None,
            anonymous_limit: ANONYMOUS_HOURLY_LIMIT,
            window_secs: 60.0,
            abuse_retry_after_secs: 60,
            latency: LatencyProfile::default(),
            port: 0,
        }
    }
}

impl MockConfig {
    pub fn with_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { tokens: tokens.into_iter().map(Into::into).collect(), ..Self::default() }
    }

    /// Real upstream scale: 5 000 requests per hour.
    pub fn real_scale(mut self) -> Self {
        self.limit = AUTHENTICATED_HOURLY_LIMIT;
        self.window_secs = 3600.0;
        self
    }

    pub fn window(&self) -> Duration {
        Duration::from_secs_f64(self.window_secs.max(0.001))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
