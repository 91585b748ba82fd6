//! Per-service rate budgets as reported by the upstream `x-ratelimit-*` headers.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use http::HeaderMap;
use serde::{Deserialize, Serialize};

pub const HEADER_LIMIT: &str = "x-ratelimit-limit";
pub const HEADER_REMAINING: &str = "x-ratelimit-remaining";
pub const HEADER_RESET: &str = "x-ratelimit-reset";

/// Authenticated hourly budget per token on the real upstream.
pub const AUTHENTICATED_HOURLY_LIMIT: u64 = 5_000;
/// Hourly budget for requests that carry no token.
pub const ANONYMOUS_HOURLY_LIMIT: u64 = 60;

/// Which upstream API a request is accounted against. Budgets are independent per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Rest,
    Graphql,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 2] = [ServiceKind::Rest, ServiceKind::Graphql];

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Rest => "rest",
            ServiceKind::Graphql => "graphql",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            ServiceKind::Rest => 0,
            ServiceKind::Graphql => 1,
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rest" | "v3" => Ok(ServiceKind::Rest),
            "graphql" | "v4" => Ok(ServiceKind::Graphql),
            other => Err(format!("unknown api `{other}` (expected `rest` or `graphql`)")),
        }
    }
}

/// (limit, remaining, reset) for one token and one service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateBudget {
    pub limit: u64,
    pub remaining: u64,
    /// Epoch seconds at which `remaining` returns to `limit`. Zero when unknown.
    pub reset_at: u64,
    /// Set once `remaining` drops to the reserve floor; cleared on reset.
    #[serde(default)]
    pub limited: bool,
}

impl RateBudget {
    pub fn full(limit: u64) -> Self {
        Self { limit, remaining: limit, reset_at: 0, limited: false }
    }

    pub fn new(limit: u64, remaining: u64, reset_at: u64) -> Self {
        Self { limit, remaining: remaining.min(limit), reset_at, limited: false }
    }

    pub fn has_capacity(&self, min_remaining: u64) -> bool {
        self.remaining > min_remaining
    }

    /// Whether the reset moment has passed at `now`.
    pub fn reset_due(&self, now: SystemTime) -> bool {
        self.reset_at != 0 && epoch_secs_f64(now) >= self.reset_at as f64
    }

    /// Time left until reset, or `None` when no reset is pending.
    pub fn until_reset(&self, now: SystemTime) -> Option<Duration> {
        if self.reset_at == 0 {
            return None;
        }
        let reset = UNIX_EPOCH + Duration::from_secs(self.reset_at);
        Some(reset.duration_since(now).unwrap_or(Duration::ZERO))
    }
}

/// Rate-limit triple parsed from one upstream response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateHeaders {
    pub limit: u64,
    pub remaining: u64,
    pub reset: u64,
}

impl RateHeaders {
    /// Returns `None` if any of the three headers is missing or not an integer.
    pub fn parse(headers: &HeaderMap) -> Option<Self> {
        let read = |name: &str| -> Option<u64> {
            headers.get(name)?.to_str().ok()?.trim().parse().ok()
        };
        Some(Self {
            limit: read(HEADER_LIMIT)?,
            remaining: read(HEADER_REMAINING)?,
            reset: read(HEADER_RESET)?,
        })
    }
}

pub fn epoch_secs_f64(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn epoch_millis(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use http::HeaderValue;

    #[test]
    fn parses_complete_headers() {
        let mut h = HeaderMap::new();
        h.insert(HEADER_LIMIT, HeaderValue::from_static("5000"));
        h.insert(HEADER_REMAINING, HeaderValue::from_static("4999"));
        h.insert(HEADER_RESET, HeaderValue::from_static("1700000000"));
        assert_eq!(
            RateHeaders::parse(&h),
            Some(RateHeaders { limit: 5000, remaining: 4999, reset: 1_700_000_000 })
        );
    }

    #[test]
    fn partial_or_garbage_headers_are_rejected() {
        let mut h = HeaderMap::new();
        h.insert(HEADER_LIMIT, HeaderValue::from_static("5000"));
        h.insert(HEADER_REMAINING, HeaderValue::from_static("lots"));
        h.insert(HEADER_RESET, HeaderValue::from_static("1"));
        assert_eq!(RateHeaders::parse(&h), None);
        h.remove(HEADER_REMAINING);
        assert_eq!(RateHeaders::parse(&h), None);
    }

    #[test]
    fn service_kind_round_trips_through_str() {
        for kind in ServiceKind::ALL {
            assert_eq!(kind.as_str().parse::<ServiceKind>().unwrap(), kind);
        }
        assert!("soap".parse::<ServiceKind>().is_err());
    }

    #[test]
    fn reset_due_uses_wall_clock() {
        let b = RateBudget::new(50, 0, 100);
        assert!(!b.reset_due(UNIX_EPOCH + Duration::from_millis(99_999)));
        assert!(b.reset_due(UNIX_EPOCH + Duration::from_secs(100)));
        assert!(!RateBudget::full(50).reset_due(SystemTime::now()));
    }
}
