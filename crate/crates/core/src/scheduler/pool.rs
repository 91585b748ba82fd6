//! The running token pool: one dispatch loop per worker, a rebalancer for
//! deferred requests, and the entry point client handlers call.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime};

use http::header::AUTHORIZATION;
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use super::balance::{select_worker, EmptyPool, Selection};
use super::budget::{RateBudget, RateHeaders, ServiceKind, AUTHENTICATED_HOURLY_LIMIT};
use super::worker::{PendingRequest, Served, WorkerId, WorkerSnapshot, WorkerState, WorkerStatus};
use crate::error::ProxyError;
use crate::observe::{mask_token, redact_path, ActivityLog, ActivityRecord, StatusClass, WorkerView};
use crate::proxy::envelope::{classify_service, normalize_request, RequestEnvelope, UpstreamResponse, DEFAULT_USER_AGENT};
use crate::proxy::forward::{classify_response, Upstream, Verdict};

const REBALANCE_TICK: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct SchedulerSettings {
    pub request_interval: Duration,
    pub request_timeout: Duration,
    pub min_remaining: u64,
    /// Cap on requests accepted but not yet completed. `None` is unbounded.
    pub queue_cap: Option<usize>,
    /// Budget assumed per token until the upstream reports one.
    pub initial_limit: u64,
    pub user_agent: String,
    /// Keep every dispatch/complete instant for audits.
    pub trace_dispatches: bool,
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        Self {
            request_interval: Duration::from_millis(250),
            request_timeout: Duration::from_secs(20),
            min_remaining: 0,
            queue_cap: None,
            initial_limit: AUTHENTICATED_HOURLY_LIMIT,
            user_agent: DEFAULT_USER_AGENT.to_string(),
            trace_dispatches: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Dispatch,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub worker: WorkerId,
    pub request_id: u64,
    pub at: Instant,
    pub kind: TraceKind,
}

#[derive(Debug, Default)]
struct Counters {
    accepted: AtomicU64,
    completed: AtomicU64,
    dispatched: AtomicU64,
    deferred: AtomicU64,
    passthrough: AtomicU64,
}

/// Totals since the pool started.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub accepted: u64,
    pub completed: u64,
    pub dispatched: u64,
    /// Times the balancer found no eligible worker.
    pub deferred: u64,
    pub passthrough: u64,
}

/// One token and its state.
#[derive(Debug)]
pub struct Worker {
    id: WorkerId,
    secret: String,
    state: Mutex<WorkerState>,
    wake: Notify,
}

impl Worker {
    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn secret(&self) -> &str {
        &self.secret
    }

    fn lock(&self) -> MutexGuard<'_, WorkerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// What the client connection gets back for a served request.
#[derive(Debug)]
pub struct ProxyReply {
    /// `None` for the unscheduled pass-through lane.
    pub worker: Option<WorkerId>,
    pub service: ServiceKind,
    pub response: UpstreamResponse,
    pub upstream_latency: Duration,
    pub queue_len_at_dispatch: usize,
}

pub struct Pool {
    settings: SchedulerSettings,
    workers: Vec<Arc<Worker>>,
    by_secret: HashMap<String, WorkerId>,
    deferred: Mutex<VecDeque<PendingRequest>>,
    rebalance: Notify,
    upstream: Upstream,
    activity: Arc<ActivityLog>,
    next_id: AtomicU64,
    outstanding: AtomicUsize,
    counters: Counters,
    trace: Mutex<Vec<TraceEvent>>,
}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pool").field("workers", &self.workers.len()).finish_non_exhaustive()
    }
}

struct Slot<'a>(&'a AtomicUsize);

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

enum Step {
    Forward(Box<PendingRequest>, usize),
    Wait { wake: Option<Instant>, spill: Vec<PendingRequest>, freed: bool },
}

impl Pool {
    /// One worker per distinct token, in the given order.
    pub fn new(
        tokens: Vec<String>,
        settings: SchedulerSettings,
        upstream: Upstream,
        activity: Arc<ActivityLog>,
    ) -> Result<Arc<Self>, EmptyPool> {
        let mut workers = Vec::new();
        let mut by_secret = HashMap::new();
        for secret in tokens {
            if by_secret.contains_key(&secret) {
                continue;
            }
            let id = WorkerId(workers.len());
            by_secret.insert(secret.clone(), id);
            workers.push(Arc::new(Worker {
                id,
                secret,
                state: Mutex::new(WorkerState::new(id, settings.initial_limit)),
                wake: Notify::new(),
            }));
        }
        if workers.is_empty() {
            return Err(EmptyPool);
        }
        Ok(Arc::new(Self {
            settings,
            workers,
            by_secret,
            deferred: Mutex::new(VecDeque::new()),
            rebalance: Notify::new(),
            upstream,
            activity,
            next_id: AtomicU64::new(0),
            outstanding: AtomicUsize::new(0),
            counters: Counters::default(),
            trace: Mutex::new(Vec::new()),
        }))
    }

    /// Spawn the dispatch loops and the rebalancer on the current runtime.
    pub fn start(self: &Arc<Self>) -> Vec<JoinHandle<()>> {
        let mut handles: Vec<_> = self
            .workers
            .iter()
            .map(|w| tokio::spawn(run_worker(Arc::clone(self), Arc::clone(w))))
            .collect();
        handles.push(tokio::spawn(run_rebalancer(Arc::clone(self))));
        handles
    }

    pub fn settings(&self) -> &SchedulerSettings {
        &self.settings
    }

    pub fn workers(&self) -> &[Arc<Worker>] {
        &self.workers
    }

    pub fn activity(&self) -> &Arc<ActivityLog> {
        &self.activity
    }

    pub fn worker_for_secret(&self, secret: &str) -> Option<WorkerId> {
        self.by_secret.get(secret).copied()
    }

    pub fn snapshots(&self) -> Vec<WorkerSnapshot> {
        self.workers.iter().map(|w| w.lock().snapshot()).collect()
    }

    pub fn worker_views(&self, service: ServiceKind) -> Vec<WorkerView> {
        let now = Instant::now();
        let wall = SystemTime::now();
        self.workers
            .iter()
            .map(|w| WorkerView::from_snapshot(&w.lock().snapshot(), &w.secret, service, now, wall))
            .collect()
    }

    pub fn stats(&self) -> PoolStats {
        let c = &self.counters;
        PoolStats {
            accepted: c.accepted.load(Ordering::Relaxed),
            completed: c.completed.load(Ordering::Relaxed),
            dispatched: c.dispatched.load(Ordering::Relaxed),
            deferred: c.deferred.load(Ordering::Relaxed),
            passthrough: c.passthrough.load(Ordering::Relaxed),
        }
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Dispatch/complete events, if tracing was enabled.
    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn is_in_flight(&self, id: WorkerId) -> bool {
        self.workers[id.0].lock().is_in_flight()
    }

    /// Take a worker in or out of service (cluster ownership). Requests
    /// queued on a worker going to standby are rebalanced.
    pub fn set_standby(self: &Arc<Self>, id: WorkerId, standby: bool) {
        let worker = &self.workers[id.0];
        let drained = worker.lock().set_standby(standby);
        for r in drained {
            self.route(r);
        }
        worker.wake.notify_one();
        if !standby {
            self.rebalance.notify_one();
        }
    }

    pub fn set_budget(&self, id: WorkerId, service: ServiceKind, budget: RateBudget) {
        self.workers[id.0].lock().set_budget(service, budget);
    }

    /// Accept one client request and wait for its outcome.
    pub async fn submit(self: &Arc<Self>, envelope: RequestEnvelope) -> Result<ProxyReply, ProxyError> {
        let accepted_at = Instant::now();
        let service = classify_service(envelope.path(), &envelope.method);
        let method = envelope.method.clone();
        let path = redact_path(&envelope.path_and_query);
        let result = self.submit_inner(envelope, service, accepted_at).await;

        let (worker, status, class, latency, queue_len) = match &result {
            Ok(r) => (r.worker, Some(r.response.status.as_u16()), StatusClass::of(r.response.status), r.upstream_latency, r.queue_len_at_dispatch),
            Err(ProxyError::Timeout) => (None, None, StatusClass::Timeout, self.settings.request_timeout, 0),
            Err(e) => (None, Some(e.status().as_u16()), StatusClass::of(e.status()), accepted_at.elapsed(), 0),
        };
        self.activity.record(ActivityRecord {
            at: Instant::now(),
            timestamp: SystemTime::now(),
            worker,
            service,
            method,
            path,
            status,
            class,
            latency,
            queue_len,
        });
        result
    }

    async fn submit_inner(
        self: &Arc<Self>,
        mut envelope: RequestEnvelope,
        service: ServiceKind,
        accepted_at: Instant,
    ) -> Result<ProxyReply, ProxyError> {
        let pinned = match envelope.client_token() {
            None => None,
            Some(token) => match self.by_secret.get(token) {
                Some(&id) => Some(id),
                None => return self.pass_through(envelope, service).await,
            },
        };
        if pinned.is_some() {
            // the worker puts its own (identical) token back
            envelope.headers.remove(AUTHORIZATION);
        }
        let _slot = self.admit().ok_or(ProxyError::QueueFull)?;
        self.counters.accepted.fetch_add(1, Ordering::Relaxed);

        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (mut request, rx) = PendingRequest::new(id, envelope, service, accepted_at, self.settings.request_timeout);
        if let Some(w) = pinned {
            request = request.pinned_to(w);
        }
        self.route(request);
        let outcome = rx.await.unwrap_or_else(|_| Err(ProxyError::Internal("request dropped before completion".into())));
        self.counters.completed.fetch_add(1, Ordering::Relaxed);
        outcome.map(|served: Served| ProxyReply {
            worker: Some(served.worker),
            service,
            response: served.response,
            upstream_latency: served.upstream_latency,
            queue_len_at_dispatch: served.queue_len_at_dispatch,
        })
    }

    fn admit(&self) -> Option<Slot<'_>> {
        let cap = self.settings.queue_cap.unwrap_or(usize::MAX);
        self.outstanding
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < cap).then_some(n + 1))
            .ok()
            .map(|_| Slot(&self.outstanding))
    }

    async fn pass_through(&self, envelope: RequestEnvelope, service: ServiceKind) -> Result<ProxyReply, ProxyError> {
        warn!(path = %redact_path(&envelope.path_and_query), "request carries a token outside the pool; forwarding unscheduled");
        self.counters.passthrough.fetch_add(1, Ordering::Relaxed);
        let envelope = normalize_request(envelope, "", &self.settings.user_agent);
        let started = Instant::now();
        let response = self.upstream.forward(envelope, service, self.settings.request_timeout).await?;
        Ok(ProxyReply { worker: None, service, response, upstream_latency: started.elapsed(), queue_len_at_dispatch: 0 })
    }

    /// Hand a request to the best worker, or park it in the deferred pool.
    fn route(self: &Arc<Self>, request: PendingRequest) {
        if let Some(pin) = request.pinned {
            let worker = &self.workers[pin.0];
            let res = worker.lock().enqueue(request);
            match res {
                Ok(_) => worker.wake.notify_one(),
                Err((_, back)) => back.resolve(Err(ProxyError::PoolExhausted { retry_after: None })),
            }
            return;
        }
        let mut request = request;
        for _ in 0..self.workers.len() + 1 {
            let snaps = self.snapshots();
            match select_worker(&snaps, request.service, self.settings.min_remaining) {
                Ok(Selection::Worker(id)) => {
                    let worker = &self.workers[id.0];
                    let res = worker.lock().enqueue(request);
                    match res {
                        Ok(_) => {
                            worker.wake.notify_one();
                            return;
                        }
                        // invalidated between snapshot and enqueue; pick again
                        Err((_, back)) => request = back,
                    }
                }
                Ok(Selection::Defer) | Err(EmptyPool) => break,
            }
        }
        self.defer(request);
    }

    fn defer(&self, request: PendingRequest) {
        self.counters.deferred.fetch_add(1, Ordering::Relaxed);
        match self.check_viable(request.service, request.deadline) {
            Ok(()) => {
                self.deferred.lock().unwrap_or_else(|e| e.into_inner()).push_back(request);
                self.rebalance.notify_one();
            }
            Err(e) => request.resolve(Err(e)),
        }
    }

    /// Fail fast when no worker can possibly open up before `deadline`.
    fn check_viable(&self, service: ServiceKind, deadline: Instant) -> Result<(), ProxyError> {
        let now = Instant::now();
        let wall = SystemTime::now();
        let min = self.settings.min_remaining;
        let mut earliest: Option<Instant> = None;
        for snap in self.snapshots() {
            let budget = snap.budget(service);
            let budget_open = if budget.has_capacity(min) {
                now
            } else {
                budget.until_reset(wall).map_or(now, |d| now + d)
            };
            let opens = match snap.status {
                WorkerStatus::Invalid => continue,
                WorkerStatus::Standby => now,
                WorkerStatus::Active => budget_open,
                WorkerStatus::AbuseCooldown { until } => until.max(budget_open),
            };
            earliest = Some(earliest.map_or(opens, |e| e.min(opens)));
        }
        match earliest {
            None => Err(ProxyError::PoolExhausted { retry_after: None }),
            Some(t) if t > deadline => {
                let wait = t.saturating_duration_since(now);
                Err(ProxyError::PoolExhausted { retry_after: Some(Duration::from_secs(wait.as_secs() + 1)) })
            }
            Some(_) => Ok(()),
        }
    }

    /// Apply resets and cooldown expiry everywhere; wake workers that changed.
    fn refresh_workers(&self) -> bool {
        let now = Instant::now();
        let wall = SystemTime::now();
        let mut any = false;
        for w in &self.workers {
            let changed = {
                let mut st = w.lock();
                st.handle_reset(wall) | st.refresh_cooldown(now)
            };
            if changed {
                w.wake.notify_one();
                any = true;
            }
        }
        any
    }

    fn push_trace(&self, worker: WorkerId, request_id: u64, at: Instant, kind: TraceKind) {
        if self.settings.trace_dispatches {
            self.trace.lock().unwrap_or_else(|e| e.into_inner()).push(TraceEvent { worker, request_id, at, kind });
        }
    }

    /// Forward one dispatched request and settle its outcome.
    async fn execute(self: &Arc<Self>, worker: &Worker, request: PendingRequest, queue_len: usize) {
        let service = request.service;
        let envelope = normalize_request(request.envelope.clone(), &worker.secret, &self.settings.user_agent);
        let started = Instant::now();
        let result = self.upstream.forward(envelope, service, self.settings.request_timeout).await;
        let latency = started.elapsed();
        let now = Instant::now();
        let wall = SystemTime::now();
        let min = self.settings.min_remaining;
        let request_id = request.id;

        let mut reroute = Vec::new();
        {
            let mut st = worker.lock();
            match result {
                Err(e) => {
                    if e == ProxyError::Timeout {
                        // the call may have been counted upstream
                        st.update_budget(service, None, min, wall);
                    }
                    st.complete(request, Err(e));
                }
                Ok(response) => match classify_response(response.status, &response.headers, &response.body) {
                    Verdict::Success => {
                        st.update_budget(service, RateHeaders::parse(&response.headers), min, wall);
                        let served = Served { worker: worker.id, response, upstream_latency: latency, queue_len_at_dispatch: queue_len };
                        st.complete(request, Ok(served));
                    }
                    Verdict::Unauthorized => {
                        warn!(worker = %worker.id, token = %mask_token(&worker.secret), "upstream rejected token; worker disabled");
                        st.release_in_flight(&request);
                        let drained = st.mark_invalid();
                        if request.pinned.is_some() {
                            let served = Served { worker: worker.id, response, upstream_latency: latency, queue_len_at_dispatch: queue_len };
                            request.resolve(Ok(served));
                        } else {
                            reroute.push(request);
                        }
                        reroute.extend(drained);
                    }
                    Verdict::Abuse { retry_after } => {
                        warn!(worker = %worker.id, retry_after = ?retry_after, "abuse detection triggered; cooling down");
                        st.mark_abuse(now, retry_after);
                        if request.expired(now) {
                            st.complete(request, Err(ProxyError::Timeout));
                        } else {
                            st.requeue_in_flight(request);
                        }
                    }
                    Verdict::RateLimited => {
                        info!(worker = %worker.id, %service, "budget exhausted upstream");
                        let mut headers = RateHeaders::parse(&response.headers);
                        if let Some(h) = headers.as_mut() {
                            h.remaining = 0;
                        }
                        st.update_budget(service, headers, min, wall);
                        if headers.is_none() {
                            let mut b = st.budget(service);
                            b.remaining = 0;
                            b.limited = true;
                            st.set_budget(service, b);
                        }
                        st.requeue_in_flight(request);
                    }
                },
            }
        }
        self.push_trace(worker.id, request_id, Instant::now(), TraceKind::Complete);
        for r in reroute {
            if r.pinned.is_some() {
                r.resolve(Err(ProxyError::PoolExhausted { retry_after: None }));
            } else {
                self.route(r);
            }
        }
        worker.wake.notify_one();
    }
}

async fn run_worker(pool: Arc<Pool>, worker: Arc<Worker>) {
    let interval = pool.settings.request_interval;
    let min = pool.settings.min_remaining;
    loop {
        let step = {
            let now = Instant::now();
            let wall = SystemTime::now();
            let mut st = worker.lock();
            let freed = st.handle_reset(wall) | st.refresh_cooldown(now);
            st.expire(now);
            match st.dispatch_next(now, interval, min) {
                Some(request) => {
                    pool.push_trace(worker.id, request.id, now, TraceKind::Dispatch);
                    Step::Forward(Box::new(request), st.queue_len())
                }
                None => {
                    let spill = if st.status() == WorkerStatus::Active && !st.is_in_flight() {
                        st.drain_budget_blocked(min)
                    } else {
                        Vec::new()
                    };
                    Step::Wait { wake: st.next_wake(now, wall, interval), spill, freed }
                }
            }
        };
        match step {
            Step::Forward(request, queue_len) => {
                pool.counters.dispatched.fetch_add(1, Ordering::Relaxed);
                pool.execute(&worker, *request, queue_len).await;
            }
            Step::Wait { wake, spill, freed } => {
                if freed {
                    pool.rebalance.notify_one();
                }
                if !spill.is_empty() {
                    debug!(worker = %worker.id, n = spill.len(), "budget at floor; rebalancing queued requests");
                }
                for r in spill {
                    pool.route(r);
                }
                match wake {
                    Some(at) => {
                        tokio::select! {
                            _ = worker.wake.notified() => {}
                            _ = tokio::time::sleep_until(at.into()) => {}
                        }
                    }
                    None => worker.wake.notified().await,
                }
            }
        }
    }
}

async fn run_rebalancer(pool: Arc<Pool>) {
    loop {
        if pool.deferred_len() == 0 {
            pool.rebalance.notified().await;
            continue;
        }
        pool.refresh_workers();
        let batch: Vec<PendingRequest> = pool.deferred.lock().unwrap_or_else(|e| e.into_inner()).drain(..).collect();
        let mut keep = Vec::new();
        let min = pool.settings.min_remaining;
        for request in batch {
            let now = Instant::now();
            if request.expired(now) {
                request.resolve(Err(ProxyError::Timeout));
                continue;
            }
            let snaps = pool.snapshots();
            match select_worker(&snaps, request.service, min) {
                Ok(Selection::Worker(id)) => {
                    let worker = &pool.workers[id.0];
                    let res = worker.lock().enqueue(request);
                    match res {
                        Ok(_) => worker.wake.notify_one(),
                        Err((_, back)) => keep.push(back),
                    }
                }
                Ok(Selection::Defer) | Err(EmptyPool) => match pool.check_viable(request.service, request.deadline) {
                    Ok(()) => keep.push(request),
                    Err(e) => request.resolve(Err(e)),
                },
            }
        }
        {
            let mut deferred = pool.deferred.lock().unwrap_or_else(|e| e.into_inner());
            for r in keep.into_iter().rev() {
                deferred.push_front(r);
            }
        }
        tokio::select! {
            _ = pool.rebalance.notified() => {}
            _ = tokio::time::sleep(REBALANCE_TICK) => {}
        }
    }
}
