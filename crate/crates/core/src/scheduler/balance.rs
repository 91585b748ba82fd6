//! Worker selection for incoming requests.

use std::cmp::Reverse;

use thiserror::Error;

use super::budget::ServiceKind;
use super::worker::{WorkerId, WorkerSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Worker(WorkerId),
    /// No worker can take the request right now.
    Defer,
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("worker pool is empty")]
pub struct EmptyPool;

/// Pick the worker for a request on `service`.
///
/// Only ACTIVE workers with more than `min_remaining` requests left are
/// candidates. Among them an idle worker wins outright; otherwise the
/// shortest pending queue wins. Ties go to the larger remaining budget, then
/// to the lower worker id.
pub fn select_worker(
    workers: &[WorkerSnapshot],
    service: ServiceKind,
    min_remaining: u64,
) -> Result<Selection, EmptyPool> {
    if workers.is_empty() {
        return Err(EmptyPool);
    }
    let best = workers
        .iter()
        .filter(|w| w.is_eligible(service, min_remaining))
        .min_by_key(|w| (!w.is_idle(), w.queue_len, Reverse(w.budget(service).remaining), w.id));
    Ok(best.map_or(Selection::Defer, |w| Selection::Worker(w.id)))
}
