//! Per-token worker state. All methods are synchronous and take the current
//! time explicitly, so the async pool and the simulated-clock tests drive the
//! same code.

use std::collections::VecDeque;
use std::fmt;
use std::time::{Duration, Instant, SystemTime};

use serde::Serialize;
use tokio::sync::oneshot;

use super::budget::{RateBudget, RateHeaders, ServiceKind};
use crate::error::{EnqueueError, ProxyError};
use crate::proxy::envelope::{RequestEnvelope, UpstreamResponse};

/// Cooldown applied when an abuse response carries no `retry-after`.
pub const DEFAULT_ABUSE_COOLDOWN: Duration = Duration::from_secs(60);

/// Window assumed for the pessimistic fallback when the upstream sends no reset time.
const FALLBACK_WINDOW: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct WorkerId(pub usize);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerStatus {
    Active,
    /// Upstream rejected the token; permanent.
    Invalid,
    AbuseCooldown { until: Instant },
    /// Token is leased to another cluster instance.
    Standby,
}

impl WorkerStatus {
    pub fn label(&self) -> &'static str {
        match self {
            WorkerStatus::Active => "ACTIVE",
            WorkerStatus::Invalid => "INVALID",
            WorkerStatus::AbuseCooldown { .. } => "COOLDOWN",
            WorkerStatus::Standby => "STANDBY",
        }
    }
}

/// A request served by a worker, as handed back to the client connection.
#[derive(Debug)]
pub struct Served {
    pub worker: WorkerId,
    pub response: UpstreamResponse,
    pub upstream_latency: Duration,
    pub queue_len_at_dispatch: usize,
}

pub type Outcome = Result<Served, ProxyError>;

/// A client request waiting for (or being forwarded by) a worker.
#[derive(Debug)]
pub struct PendingRequest {
    pub id: u64,
    pub envelope: RequestEnvelope,
    pub service: ServiceKind,
    pub enqueued_at: Instant,
    pub deadline: Instant,
    /// Set when the client authenticated with a pool token: only that worker may serve it.
    pub pinned: Option<WorkerId>,
    completion: oneshot::Sender<Outcome>,
}

impl PendingRequest {
    pub fn new(
        id: u64,
        envelope: RequestEnvelope,
        service: ServiceKind,
        now: Instant,
        timeout: Duration,
    ) -> (Self, oneshot::Receiver<Outcome>) {
        let (tx, rx) = oneshot::channel();
        let req = Self {
            id,
            envelope,
            service,
            enqueued_at: now,
            deadline: now + timeout,
            pinned: None,
            completion: tx,
        };
        (req, rx)
    }

    pub fn pinned_to(mut self, worker: WorkerId) -> Self {
        self.pinned = Some(worker);
        self
    }

    pub fn expired(&self, now: Instant) -> bool {
        now > self.deadline
    }

    /// Resolve the completion handle. Consumes the request, so a request can
    /// only ever be completed once.
    pub fn resolve(self, outcome: Outcome) {
        // The receiver is gone if the client hung up; nothing left to do then.
        let _ = self.completion.send(outcome);
    }
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    request_id: u64,
}

/// Point-in-time copy of the fields the balancer and the monitor read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSnapshot {
    pub id: WorkerId,
    pub status: WorkerStatus,
    pub queue_len: usize,
    pub in_flight: bool,
    pub budgets: [RateBudget; 2],
}

impl WorkerSnapshot {
    pub fn budget(&self, service: ServiceKind) -> &RateBudget {
        &self.budgets[service.index()]
    }

    pub fn is_idle(&self) -> bool {
        self.queue_len == 0 && !self.in_flight
    }

    pub fn is_eligible(&self, service: ServiceKind, min_remaining: u64) -> bool {
        self.status == WorkerStatus::Active && self.budget(service).has_capacity(min_remaining)
    }
}

#[derive(Debug)]
pub struct WorkerState {
    id: WorkerId,
    queue: VecDeque<PendingRequest>,
    in_flight: Option<InFlight>,
    last_dispatch_at: Option<Instant>,
    budgets: [RateBudget; 2],
    status: WorkerStatus,
}

impl WorkerState {
    pub fn new(id: WorkerId, initial_limit: u64) -> Self {
        Self {
            id,
            queue: VecDeque::new(),
            in_flight: None,
            last_dispatch_at: None,
            budgets: [RateBudget::full(initial_limit); 2],
            status: WorkerStatus::Active,
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn status(&self) -> WorkerStatus {
        self.status
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn last_dispatch_at(&self) -> Option<Instant> {
        self.last_dispatch_at
    }

    pub fn budget(&self, service: ServiceKind) -> RateBudget {
        self.budgets[service.index()]
    }

    pub fn set_budget(&mut self, service: ServiceKind, budget: RateBudget) {
        self.budgets[service.index()] = budget;
    }

    pub fn snapshot(&self) -> WorkerSnapshot {
        WorkerSnapshot {
            id: self.id,
            status: self.status,
            queue_len: self.queue.len(),
            in_flight: self.in_flight.is_some(),
            budgets: self.budgets,
        }
    }

    /// Append at the tail. Returns the request's position in the queue.
    /// A refused request is handed back so the caller can route it elsewhere.
    #[allow(clippy::result_large_err)]
    pub fn enqueue(&mut self, request: PendingRequest) -> Result<usize, (EnqueueError, PendingRequest)> {
        if self.status == WorkerStatus::Invalid {
            return Err((EnqueueError::Invalid, request));
        }
        self.queue.push_back(request);
        Ok(self.queue.len() - 1)
    }

    /// Pop the queue head if the worker may send it now. Heads whose deadline
    /// already passed are completed with a timeout and skipped.
    pub fn dispatch_next(&mut self, now: Instant, interval: Duration, min_remaining: u64) -> Option<PendingRequest> {
        if self.in_flight.is_some() || self.status != WorkerStatus::Active {
            return None;
        }
        while self.queue.front().is_some_and(|r| r.expired(now)) {
            if let Some(expired) = self.queue.pop_front() {
                expired.resolve(Err(ProxyError::Timeout));
            }
        }
        let head = self.queue.front()?;
        if let Some(last) = self.last_dispatch_at {
            if now.saturating_duration_since(last) < interval {
                return None;
            }
        }
        if !self.budget(head.service).has_capacity(min_remaining) {
            return None;
        }
        let request = self.queue.pop_front()?;
        self.in_flight = Some(InFlight { request_id: request.id });
        self.last_dispatch_at = Some(now);
        Some(request)
    }

    /// Finish the in-flight request and deliver its outcome.
    ///
    /// # Panics
    /// If `request` is not the one currently in flight.
    pub fn complete(&mut self, request: PendingRequest, outcome: Outcome) {
        self.clear_in_flight(&request);
        request.resolve(outcome);
    }

    /// Put the in-flight request back at the head of the queue (abuse or rate-limit retry).
    pub fn requeue_in_flight(&mut self, request: PendingRequest) {
        self.clear_in_flight(&request);
        self.queue.push_front(request);
    }

    /// Release the in-flight slot without resolving the request; the caller
    /// takes over responsibility for completing it.
    pub fn release_in_flight(&mut self, request: &PendingRequest) {
        self.clear_in_flight(request);
    }

    fn clear_in_flight(&mut self, request: &PendingRequest) {
        let current = self.in_flight.take();
        assert!(
            current.is_some_and(|f| f.request_id == request.id),
            "{}: completing request {} which is not in flight",
            self.id,
            request.id
        );
    }

    /// Record what the upstream reported about this token's budget. Missing
    /// headers fall back to a local decrement of one.
    pub fn update_budget(
        &mut self,
        service: ServiceKind,
        headers: Option<RateHeaders>,
        min_remaining: u64,
        now: SystemTime,
    ) {
        let budget = &mut self.budgets[service.index()];
        match headers {
            Some(h) => {
                budget.limit = h.limit;
                budget.remaining = h.remaining.min(h.limit);
                budget.reset_at = h.reset;
            }
            None => {
                budget.remaining = budget.remaining.saturating_sub(1);
                if budget.reset_at == 0 {
                    budget.reset_at = super::budget::epoch_secs_f64(now + FALLBACK_WINDOW).ceil() as u64;
                }
            }
        }
        budget.limited = budget.remaining <= min_remaining;
    }

    /// Refill every budget whose reset moment has passed. Returns true if any did.
    pub fn handle_reset(&mut self, now: SystemTime) -> bool {
        let mut changed = false;
        for budget in &mut self.budgets {
            if budget.reset_due(now) {
                budget.remaining = budget.limit;
                budget.reset_at = 0;
                budget.limited = false;
                changed = true;
            }
        }
        changed
    }

    pub fn mark_abuse(&mut self, now: Instant, retry_after: Option<Duration>) {
        if self.status == WorkerStatus::Invalid {
            return;
        }
        let until = now + retry_after.unwrap_or(DEFAULT_ABUSE_COOLDOWN);
        self.status = WorkerStatus::AbuseCooldown { until };
    }

    /// Leave the abuse cooldown once it has elapsed. Returns true on transition.
    pub fn refresh_cooldown(&mut self, now: Instant) -> bool {
        match self.status {
            WorkerStatus::AbuseCooldown { until } if now >= until => {
                self.status = WorkerStatus::Active;
                true
            }
            _ => false,
        }
    }

    /// Permanently disable the worker and hand back its queued requests, in order.
    pub fn mark_invalid(&mut self) -> Vec<PendingRequest> {
        self.status = WorkerStatus::Invalid;
        self.queue.drain(..).collect()
    }

    /// Cluster ownership toggle. Leaving ownership drains the unpinned queue.
    pub fn set_standby(&mut self, standby: bool) -> Vec<PendingRequest> {
        match (standby, self.status) {
            (_, WorkerStatus::Invalid) => Vec::new(),
            (true, _) => {
                self.status = WorkerStatus::Standby;
                self.drain_where(|r| r.pinned.is_none())
            }
            (false, WorkerStatus::Standby) => {
                self.status = WorkerStatus::Active;
                Vec::new()
            }
            (false, _) => Vec::new(),
        }
    }

    /// Queued requests that cannot go out because their service budget sits at
    /// the reserve floor. Pinned requests stay; they can only be served here.
    pub fn drain_budget_blocked(&mut self, min_remaining: u64) -> Vec<PendingRequest> {
        let blocked = [
            !self.budgets[0].has_capacity(min_remaining),
            !self.budgets[1].has_capacity(min_remaining),
        ];
        if !blocked[0] && !blocked[1] {
            return Vec::new();
        }
        self.drain_where(|r| r.pinned.is_none() && blocked[r.service.index()])
    }

    fn drain_where(&mut self, mut take: impl FnMut(&PendingRequest) -> bool) -> Vec<PendingRequest> {
        let mut taken = Vec::new();
        let mut kept = VecDeque::with_capacity(self.queue.len());
        for r in self.queue.drain(..) {
            if take(&r) {
                taken.push(r);
            } else {
                kept.push_back(r);
            }
        }
        self.queue = kept;
        taken
    }

    /// Fail every queued request whose deadline has passed.
    pub fn expire(&mut self, now: Instant) -> usize {
        let expired = self.drain_where(|r| r.expired(now));
        let n = expired.len();
        for r in expired {
            r.resolve(Err(ProxyError::Timeout));
        }
        n
    }

    /// Earliest instant at which something in this worker could change on its own:
    /// pacing slot, cooldown expiry, budget reset or a queued deadline.
    pub fn next_wake(&self, now: Instant, wall: SystemTime, interval: Duration) -> Option<Instant> {
        let mut wake: Option<Instant> = None;
        let mut consider = |t: Instant| wake = Some(wake.map_or(t, |w| w.min(t)));
        if !self.queue.is_empty() {
            if let Some(last) = self.last_dispatch_at {
                consider(last + interval);
            }
            if let Some(d) = self.queue.iter().map(|r| r.deadline).min() {
                consider(d + Duration::from_millis(1));
            }
        }
        if let WorkerStatus::AbuseCooldown { until } = self.status {
            consider(until);
        }
        for b in &self.budgets {
            if b.limited {
                if let Some(left) = b.until_reset(wall) {
                    consider(now + left);
                }
            }
        }
        wake
    }
}
