//! Token-pool proxy for the GitHub REST and GraphQL APIs.
//!
//! Each configured token gets a worker with its own queue and rate budget.
//! Requests go to the least loaded worker that still has budget; a worker
//! never has more than one call open upstream and waits a configurable
//! interval between dispatches.

pub mod app;
pub mod bench;
pub mod cluster;
pub mod config;
pub mod error;
pub mod mock;
pub mod observe;
pub mod proxy;
pub mod scheduler;

pub use config::{parse_config, ProxyArgs, ProxyConfig};
pub use error::{ConfigError, EnqueueError, ProxyError};
pub use observe::{ActivityLog, ActivityRecord, StatusClass};
pub use proxy::{RequestEnvelope, UpstreamResponse};
pub use scheduler::{
    select_worker, Pool, RateBudget, SchedulerSettings, Selection, ServiceKind, WorkerId, WorkerSnapshot, WorkerStatus,
};
