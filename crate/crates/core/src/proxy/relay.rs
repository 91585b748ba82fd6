use http::{HeaderMap, HeaderValue};

use super::envelope::UpstreamResponse;
use crate::scheduler::budget::{RateHeaders, HEADER_LIMIT, HEADER_REMAINING, HEADER_RESET};
use crate::scheduler::{ServiceKind, WorkerId, WorkerSnapshot, WorkerStatus};

/// Names the worker that served a request. Never carries the token.
pub const HEADER_PROXY_WORKER: &str = "x-proxy-worker";

/// Pool-wide budget view for one service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateBudget {
    pub limit: u64,
    pub remaining: u64,
    /// Earliest known reset among contributing workers; zero if none known.
    pub reset: u64,
}

/// Sum of limits and remaining over ACTIVE workers, earliest reset among them.
/// `None` when no worker is ACTIVE.
pub fn aggregate_budget(snapshots: &[WorkerSnapshot], service: ServiceKind) -> Option<AggregateBudget> {
    let active: Vec<_> = snapshots.iter().filter(|w| w.status == WorkerStatus::Active).collect();
    if active.is_empty() {
        return None;
    }
    let mut agg = AggregateBudget { limit: 0, remaining: 0, reset: 0 };
    for w in active {
        let b = w.budget(service);
        agg.limit += b.limit;
        agg.remaining += b.remaining;
        if b.reset_at != 0 && (agg.reset == 0 || b.reset_at < agg.reset) {
            agg.reset = b.reset_at;
        }
    }
    Some(agg)
}

/// Build the client-facing response: status and body untouched, rate-limit
/// headers replaced by the pool aggregate, serving worker named.
pub fn relay_response(
    mut response: UpstreamResponse,
    service: ServiceKind,
    worker: WorkerId,
    snapshots: &[WorkerSnapshot],
) -> UpstreamResponse {
    if let Some(upstream) = RateHeaders::parse(&response.headers) {
        if let Some(agg) = aggregate_budget(snapshots, service) {
            let reset = if agg.reset == 0 { upstream.reset } else { agg.reset };
            set_num(&mut response.headers, HEADER_LIMIT, agg.limit);
            set_num(&mut response.headers, HEADER_REMAINING, agg.remaining);
            set_num(&mut response.headers, HEADER_RESET, reset);
        }
    }
    if let Ok(v) = HeaderValue::from_str(&worker.to_string()) {
        response.headers.insert(HEADER_PROXY_WORKER, v);
    }
    response
}

fn set_num(headers: &mut HeaderMap, name: &'static str, value: u64) {
    headers.insert(name, HeaderValue::from(value));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::RateBudget;
    use http::StatusCode;
    use proptest::prelude::*;

    fn snap(id: usize, remaining: u64, reset: u64) -> WorkerSnapshot {
        WorkerSnapshot {
            id: WorkerId(id),
            status: WorkerStatus::Active,
            queue_len: 0,
            in_flight: false,
            budgets: [RateBudget::new(50, remaining, reset), RateBudget::full(50)],
        }
    }

    fn upstream(limit: u64, remaining: u64, reset: u64) -> UpstreamResponse {
        let mut h = HeaderMap::new();
        set_num(&mut h, HEADER_LIMIT, limit);
        set_num(&mut h, HEADER_REMAINING, remaining);
        set_num(&mut h, HEADER_RESET, reset);
        h.insert("etag", HeaderValue::from_static("\"abc\""));
        UpstreamResponse::new(StatusCode::OK, h, "payload".into())
    }

    #[test]
    fn remaining_is_summed() {
        let pool = [snap(0, 10, 200), snap(1, 20, 100)];
        let out = relay_response(upstream(50, 10, 200), ServiceKind::Rest, WorkerId(0), &pool);
        assert_eq!(out.headers[HEADER_REMAINING], "30");
        assert_eq!(out.headers[HEADER_LIMIT], "100");
        assert_eq!(out.headers[HEADER_RESET], "100");
        assert_eq!(out.headers[HEADER_PROXY_WORKER], "w0");
        assert_eq!(out.body, "payload");
    }

    #[test]
    fn single_worker_is_identity_on_rate_headers() {
        let pool = [snap(0, 42, 1234)];
        let up = upstream(50, 42, 1234);
        let out = relay_response(up.clone(), ServiceKind::Rest, WorkerId(0), &pool);
        for name in [HEADER_LIMIT, HEADER_REMAINING, HEADER_RESET, "etag"] {
            assert_eq!(out.headers[name], up.headers[name]);
        }
        assert_eq!(out.status, up.status);
    }

    #[test]
    fn inactive_workers_do_not_count() {
        let mut dead = snap(1, 40, 10);
        dead.status = WorkerStatus::Invalid;
        let agg = aggregate_budget(&[snap(0, 5, 99), dead], ServiceKind::Rest).unwrap();
        assert_eq!(agg, AggregateBudget { limit: 50, remaining: 5, reset: 99 });
    }

    #[test]
    fn missing_upstream_headers_stay_missing() {
        let resp = UpstreamResponse::new(StatusCode::OK, HeaderMap::new(), "x".into());
        let out = relay_response(resp, ServiceKind::Rest, WorkerId(2), &[snap(2, 1, 1)]);
        assert!(!out.headers.contains_key(HEADER_REMAINING));
    }

    proptest! {
        #[test]
        fn aggregate_matches_recount(
            states in proptest::collection::vec((0u64..5000, 0u64..10_000, any::<bool>()), 1..8)
        ) {
            let pool: Vec<_> = states.iter().enumerate().map(|(i, &(rem, reset, active))| {
                let mut s = snap(i, rem.min(50), reset);
                if !active { s.status = WorkerStatus::AbuseCooldown { until: std::time::Instant::now() }; }
                s
            }).collect();
            let got = aggregate_budget(&pool, ServiceKind::Rest);
            let live: Vec<_> = states.iter().filter(|s| s.2).collect();
            if live.is_empty() {
                prop_assert!(got.is_none());
            } else {
                let sum: u64 = live.iter().map(|s| s.0.min(50)).sum();
                let min_reset = live.iter().map(|s| s.1).filter(|&r| r != 0).min().unwrap_or(0);
                let got = got.unwrap();
                prop_assert_eq!(got.remaining, sum);
                prop_assert_eq!(got.reset, min_reset);
                prop_assert_eq!(got.limit, 50 * live.len() as u64);
            }
        }
    }
}
