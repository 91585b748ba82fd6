//! Fixed-width text frame for the live activity monitor.

use std::fmt::Write as _;
use std::time::{Duration, Instant, SystemTime};

use super::activity::{ClassCounts, StatusClass};
use super::mask_token;
use crate::scheduler::{ServiceKind, WorkerId, WorkerSnapshot, WorkerStatus};

pub const FRAME_WIDTH: usize = 78;
pub const REFRESH: Duration = Duration::from_secs(1);

/// One monitor row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerView {
    pub id: WorkerId,
    pub token_hint: String,
    pub status: String,
    pub queue_len: usize,
    pub in_flight: bool,
    pub remaining: u64,
    pub limit: u64,
    pub reset_in: Option<Duration>,
    pub cooldown_in: Option<Duration>,
}

impl WorkerView {
    pub fn from_snapshot(snap: &WorkerSnapshot, secret: &str, service: ServiceKind, now: Instant, wall: SystemTime) -> Self {
        let budget = snap.budget(service);
        let cooldown_in = match snap.status {
            WorkerStatus::AbuseCooldown { until } => Some(until.saturating_duration_since(now)),
            _ => None,
        };
        let status = if snap.status == WorkerStatus::Active && budget.limited {
            "LIMITED".to_string()
        } else {
            snap.status.label().to_string()
        };
        Self {
            id: snap.id,
            token_hint: mask_token(secret),
            status,
            queue_len: snap.queue_len,
            in_flight: snap.in_flight,
            remaining: budget.remaining,
            limit: budget.limit,
            reset_in: budget.until_reset(wall),
            cooldown_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorSummary {
    pub service: ServiceKind,
    pub window: Duration,
    pub counts: ClassCounts,
    pub workers: Vec<WorkerView>,
}

fn countdown(d: Duration) -> String {
    let s = d.as_secs();
    if s >= 3600 {
        format!("{}h{:02}m", s / 3600, (s % 3600) / 60)
    } else {
        format!("{}m{:02}s", s / 60, s % 60)
    }
}

fn clip(mut line: String) -> String {
    if line.chars().count() > FRAME_WIDTH {
        line = line.chars().take(FRAME_WIDTH).collect();
    }
    format!("{line:<FRAME_WIDTH$}")
}

/// Render one frame. Every line is exactly `FRAME_WIDTH` characters.
pub fn render_monitor(summary: &MonitorSummary) -> String {
    let mut lines = Vec::new();
    lines.push(clip(format!(
        " ghproxy activity  service={}  window={}s",
        summary.service,
        summary.window.as_secs()
    )));
    lines.push("-".repeat(FRAME_WIDTH));
    lines.push(clip(format!(
        " {:<6}{:<10}{:<11}{:>7} {:>6}  {:>13}  {:>10}",
        "worker", "token", "status", "queue", "busy", "remaining", "reset"
    )));
    for w in &summary.workers {
        let budget = format!("{}/{}", w.remaining, w.limit);
        let reset = w.reset_in.map_or_else(|| "-".to_string(), countdown);
        let status = match w.cooldown_in {
            Some(left) => format!("{} {}", w.status, left.as_secs()),
            None => w.status.clone(),
        };
        lines.push(clip(format!(
            " {:<6}{:<10}{:<11}{:>7} {:>6}  {:>13}  {:>10}",
            w.id.to_string(),
            w.token_hint,
            status,
            w.queue_len,
            if w.in_flight { "yes" } else { "no" },
            budget,
            reset
        )));
    }
    lines.push("-".repeat(FRAME_WIDTH));
    let mut hist = String::from(" ");
    for class in StatusClass::ALL {
        let _ = write!(hist, "{}:{:<8}", class, summary.counts.get(class));
    }
    let _ = write!(hist, "total:{}", summary.counts.total());
    lines.push(clip(hist));
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
