//! Authoritative record of what the mock upstream saw.

use std::collections::BTreeMap;
use std::time::{Duration, Instant, SystemTime};

use serde::Serialize;

use crate::scheduler::budget::epoch_secs_f64;
use crate::scheduler::ServiceKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub service: ServiceKind,
    pub path: String,
    #[serde(skip)]
    pub start: Instant,
    #[serde(skip)]
    pub end: Option<Instant>,
    pub status: u16,
    /// Arrived while another call with the same token was open.
    pub concurrent: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct WindowBudget {
    pub limit: u64,
    pub remaining: u64,
    pub window_end: Option<SystemTime>,
    pub min_observed: u64,
}

impl WindowBudget {
    fn new(limit: u64) -> Self {
        Self { limit, remaining: limit, window_end: None, min_observed: limit }
    }

    /// Refill if the window has closed. Remaining never goes up otherwise.
    pub fn roll(&mut self, now: SystemTime) {
        if self.window_end.is_some_and(|end| now >= end) {
            self.remaining = self.limit;
            self.window_end = None;
        }
    }

    /// Spend one request. Returns false when the budget is empty.
    pub fn spend(&mut self, now: SystemTime, window: Duration) -> bool {
        self.roll(now);
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        self.min_observed = self.min_observed.min(self.remaining);
        if self.window_end.is_none() {
            self.window_end = Some(now + window);
        }
        true
    }

    /// Epoch seconds reported in `x-ratelimit-reset` (rounded up, so a client
    /// that waits for it never arrives early).
    pub fn reset_epoch(&self, now: SystemTime, window: Duration) -> u64 {
        let end = self.window_end.unwrap_or(now + window);
        epoch_secs_f64(end).ceil() as u64
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TokenLedger {
    pub calls: Vec<CallRecord>,
    pub budgets: [WindowBudget; 2],
    pub in_flight: u32,
    pub violations: u64,
    pub forced_abuse: u32,
    pub revoked: bool,
}

impl TokenLedger {
    pub fn new(rest_limit: u64, graphql_limit: u64) -> Self {
        Self {
            calls: Vec::new(),
            budgets: [WindowBudget::new(rest_limit), WindowBudget::new(graphql_limit)],
            in_flight: 0,
            violations: 0,
            forced_abuse: 0,
            revoked: false,
        }
    }

    pub fn budget_mut(&mut self, service: ServiceKind) -> &mut WindowBudget {
        &mut self.budgets[service.index()]
    }

    pub fn reset(&mut self) {
        let limits = [self.budgets[0].limit, self.budgets[1].limit];
        *self = TokenLedger::new(limits[0], limits[1]);
    }

    fn report(&self, now: SystemTime) -> TokenReport {
        let mut remaining = BTreeMap::new();
        let mut min_remaining = BTreeMap::new();
        for service in ServiceKind::ALL {
            let mut b = self.budgets[service.index()].clone();
            b.roll(now);
            remaining.insert(service, b.remaining);
            min_remaining.insert(service, b.min_observed);
        }
        TokenReport {
            calls: self.calls.len() as u64,
            accepted: self.calls.iter().filter(|c| c.status == 200).count() as u64,
            violations: self.violations,
            remaining,
            min_remaining,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenReport {
    /// Every call that reached the mock with this token, whatever the status.
    pub calls: u64,
    /// Calls answered 200 (each spent one unit of budget).
    pub accepted: u64,
    pub violations: u64,
    pub remaining: BTreeMap<ServiceKind, u64>,
    /// Lowest remaining value left behind by any accepted call.
    pub min_remaining: BTreeMap<ServiceKind, u64>,
}

/// Summary returned by the mock's ledger endpoint and test handle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerReport {
    pub total_calls: u64,
    pub anonymous_calls: u64,
    pub unknown_token_calls: u64,
    pub violations: u64,
    pub per_token: BTreeMap<String, TokenReport>,
}

impl LedgerReport {
    pub fn token(&self, token: &str) -> &TokenReport {
        &self.per_token[token]
    }

    /// Lowest remaining ever observed on any token, for `service`.
    pub fn min_remaining(&self, service: ServiceKind) -> Option<u64> {
        self.per_token
            .values()
            .filter(|t| t.accepted > 0)
            .filter_map(|t| t.min_remaining.get(&service).copied())
            .min()
    }
}

#[derive(Debug)]
pub(crate) struct Ledger {
    pub tokens: BTreeMap<String, TokenLedger>,
    pub anonymous: TokenLedger,
    pub unknown_token_calls: u64,
}

impl Ledger {
    pub fn report(&self, now: SystemTime) -> LedgerReport {
        let per_token: BTreeMap<String, TokenReport> =
            self.tokens.iter().map(|(k, v)| (k.clone(), v.report(now))).collect();
        let anonymous_calls = self.anonymous.calls.len() as u64;
        let token_calls: u64 = per_token.values().map(|t| t.calls).sum();
        LedgerReport {
            total_calls: token_calls + anonymous_calls + self.unknown_token_calls,
            anonymous_calls,
            unknown_token_calls: self.unknown_token_calls,
            violations: per_token.values().map(|t| t.violations).sum(),
            per_token,
        }
    }

    pub fn reset(&mut self) {
        for t in self.tokens.values_mut() {
            t.reset();
        }
        self.anonymous.reset();
        self.unknown_token_calls = 0;
    }

    /// Calls (start, end) per token, for overlap audits.
    pub fn intervals(&self) -> BTreeMap<String, Vec<(Instant, Option<Instant>)>> {
        self.tokens
            .iter()
            .map(|(k, v)| (k.clone(), v.calls.iter().filter(|c| !c.concurrent).map(|c| (c.start, c.end)).collect()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::UNIX_EPOCH;

    #[test]
    fn window_spend_and_roll() {
        let t0 = UNIX_EPOCH + Duration::from_secs(1_000);
        let w = Duration::from_secs(60);
        let mut b = WindowBudget::new(2);
        assert!(b.spend(t0, w));
        assert_eq!(b.reset_epoch(t0, w), 1_060);
        assert!(b.spend(t0 + Duration::from_secs(1), w));
        assert!(!b.spend(t0 + Duration::from_secs(2), w));
        assert_eq!(b.min_observed, 0);
        assert!(b.spend(t0 + w, w));
        assert_eq!(b.remaining, 1);
    }

    #[test]
    fn reset_header_rounds_up() {
        let t0 = UNIX_EPOCH + Duration::from_millis(1_000_200);
        let mut b = WindowBudget::new(5);
        b.spend(t0, Duration::from_secs(2));
        assert_eq!(b.reset_epoch(t0, Duration::from_secs(2)), 1_003);
    }
}
