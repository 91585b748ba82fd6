//! Per-request activity records: log sink plus an in-memory ring for the monitor.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime};

use http::{Method, StatusCode};
use serde::Serialize;

use crate::scheduler::budget::epoch_millis;
use crate::scheduler::{ServiceKind, WorkerId};

pub const DEFAULT_RING_CAPACITY: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum StatusClass {
    #[serde(rename = "2xx")]
    Success,
    #[serde(rename = "3xx")]
    Redirect,
    #[serde(rename = "4xx")]
    ClientError,
    #[serde(rename = "5xx")]
    ServerError,
    #[serde(rename = "timeout")]
    Timeout,
}

impl StatusClass {
    pub const ALL: [StatusClass; 5] = [
        StatusClass::Success,
        StatusClass::Redirect,
        StatusClass::ClientError,
        StatusClass::ServerError,
        StatusClass::Timeout,
    ];

    pub fn of(status: StatusCode) -> Self {
        match status.as_u16() {
            200..=299 => StatusClass::Success,
            300..=399 => StatusClass::Redirect,
            400..=499 => StatusClass::ClientError,
            // 1xx never reaches us as a final status
            _ => StatusClass::ServerError,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatusClass::Success => "2xx",
            StatusClass::Redirect => "3xx",
            StatusClass::ClientError => "4xx",
            StatusClass::ServerError => "5xx",
            StatusClass::Timeout => "timeout",
        }
    }
}

impl fmt::Display for StatusClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityRecord {
    pub at: Instant,
    pub timestamp: SystemTime,
    pub worker: Option<WorkerId>,
    pub service: ServiceKind,
    pub method: Method,
    /// Request path with credential-bearing query parameters redacted.
    pub path: String,
    pub status: Option<u16>,
    pub class: StatusClass,
    pub latency: Duration,
    pub queue_len: usize,
}

impl ActivityRecord {
    pub fn log_line(&self) -> String {
        let worker = self.worker.map_or_else(|| "-".to_string(), |w| w.to_string());
        let status = self.status.map_or_else(|| "-".to_string(), |s| s.to_string());
        format!(
            "ts_ms={} worker={} service={} method={} path={} status={} status_class={} latency_ms={} queue={}",
            epoch_millis(self.timestamp),
            worker,
            self.service,
            self.method,
            self.path,
            status,
            self.class,
            self.latency.as_millis(),
            self.queue_len,
        )
    }
}

/// Strip query parameters that may carry a token.
pub fn redact_path(path_and_query: &str) -> String {
    let Some((path, query)) = path_and_query.split_once('?') else {
        return path_and_query.to_string();
    };
    let kept: Vec<String> = query
        .split('&')
        .map(|kv| {
            let key = kv.split('=').next().unwrap_or("");
            if matches!(key.to_ascii_lowercase().as_str(), "access_token" | "token" | "client_secret") {
                format!("{key}=REDACTED")
            } else {
                kv.to_string()
            }
        })
        .collect();
    format!("{path}?{}", kept.join("&"))
}

/// Counts by status class over one time window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: BTreeMap<StatusClass, usize>,
}

impl ClassCounts {
    pub fn get(&self, class: StatusClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

type Sink = Box<dyn Write + Send>;

pub struct ActivityLog {
    ring: Mutex<VecDeque<ActivityRecord>>,
    capacity: usize,
    sink: Mutex<Option<Sink>>,
}

impl fmt::Debug for ActivityLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActivityLog").field("capacity", &self.capacity).finish_non_exhaustive()
    }
}

impl Default for ActivityLog {
    fn default() -> Self {
        Self::new(DEFAULT_RING_CAPACITY, None)
    }
}

impl ActivityLog {
    pub fn new(capacity: usize, sink: Option<Sink>) -> Self {
        Self { ring: Mutex::new(VecDeque::with_capacity(capacity.min(4096))), capacity: capacity.max(1), sink: Mutex::new(sink) }
    }

    pub fn record(&self, record: ActivityRecord) {
        if let Some(sink) = self.sink.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            if let Err(e) = writeln!(sink, "{}", record.log_line()) {
                eprintln!("ghproxy: activity log write failed: {e}");
            }
        }
        let mut ring = self.ring.lock().unwrap_or_else(|e| e.into_inner());
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.ring.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn recent(&self) -> Vec<ActivityRecord> {
        self.ring.lock().unwrap_or_else(|e| e.into_inner()).iter().cloned().collect()
    }

    /// Class counts for records with `at` in `[now - window, now]`.
    pub fn summarize(&self, window: Duration, now: Instant) -> ClassCounts {
        let ring = self.ring.lock().unwrap_or_else(|e| e.into_inner());
        count_window(ring.iter(), window, now)
    }
}

pub(crate) fn count_window<'a>(
    records: impl Iterator<Item = &'a ActivityRecord>,
    window: Duration,
    now: Instant,
) -> ClassCounts {
    let start = now.checked_sub(window);
    let mut out = ClassCounts::default();
    for r in records {
        let inside = r.at <= now && start.is_none_or(|s| r.at >= s);
        if inside {
            *out.counts.entry(r.class).or_default() += 1;
        }
    }
    out
}
