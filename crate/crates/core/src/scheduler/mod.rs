//! Token-worker pool: budgets, per-worker queues and pacing, and the balancer.

pub mod balance;
pub mod budget;
pub mod pool;
pub mod worker;

pub use balance::{select_worker, EmptyPool, Selection};
pub use budget::{RateBudget, RateHeaders, ServiceKind};
pub use pool::{Pool, PoolStats, ProxyReply, SchedulerSettings, TraceEvent, TraceKind, Worker};
pub use worker::{
    Outcome, PendingRequest, Served, WorkerId, WorkerSnapshot, WorkerState, WorkerStatus, DEFAULT_ABUSE_COOLDOWN,
};
