//! Direct-versus-proxied collection benchmark against the mock upstream.
//!
//! Direct mode runs one sequential stream per token with a fixed pause after
//! every request. Proxied mode runs several concurrent clients per token
//! through the proxy and lets the proxy do the serializing. Both modes issue
//! the same requests and pay the same simulated processing cost per response.

mod report;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use http::StatusCode;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

pub use report::{compare, timeline_csv, Comparison, EndpointSummary};

use crate::app::{LaunchOptions, ProxyServer};
use crate::config::ProxyConfig;
use crate::mock::{LatencyProfile, MockConfig, MockUpstream};

pub const RESOURCE_KINDS: [&str; 4] = ["issues", "releases", "tags", "stargazers"];
pub const DEFAULT_DIRECT_INTERVAL: Duration = Duration::from_millis(50);
pub const DEFAULT_PROCESSING: Duration = Duration::from_millis(30);
pub const WORKERS_PER_TOKEN: usize = 3;
pub const MAX_CONCURRENT_PER_WORKER: usize = 6;

/// Pages to fetch for every resource kind of one repository.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectionTask {
    pub repo: String,
    pub resources: Vec<&'static str>,
    pub pages: u32,
}

impl CollectionTask {
    pub fn new(repo: impl Into<String>, pages: u32) -> Self {
        assert!(pages >= 1, "at least one page per resource");
        Self { repo: repo.into(), resources: RESOURCE_KINDS.to_vec(), pages }
    }

    pub fn path(&self, resource: &str, page: u32) -> String {
        format!("/repos/{}/{resource}?page={page}&per_page=100", self.repo)
    }

    /// Every request this task issues, in sequential order.
    pub fn paths(&self) -> Vec<String> {
        self.resources
            .iter()
            .flat_map(|r| (1..=self.pages).map(move |p| self.path(r, p)))
            .collect()
    }
}

/// `repos` tasks named `bench/repo-<n>`.
pub fn build_tasks(repos: usize, pages: u32) -> Vec<CollectionTask> {
    (0..repos).map(|i| CollectionTask::new(format!("bench/repo-{i}"), pages)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Direct,
    Proxied,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Proxied => "proxied",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    /// Client stream (direct: token index; proxied: client worker index).
    pub stream: usize,
    pub path: String,
    /// Offsets from the start of the run.
    pub start: Duration,
    pub end: Duration,
    pub status: u16,
}

impl RequestRecord {
    pub fn latency(&self) -> Duration {
        self.end.saturating_sub(self.start)
    }

    /// Resource kind of the path (`issues`, `tags`, ...).
    pub fn resource(&self) -> &str {
        let path = self.path.split('?').next().unwrap_or("");
        path.rsplit('/').next().unwrap_or("")
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: Mode,
    pub tokens: usize,
    pub records: Vec<RequestRecord>,
    pub wall: Duration,
    pub processing: Duration,
    /// Attempts repeated after an abuse, rate-limit or proxy error.
    pub retries: u64,
    /// Concurrency violations the upstream recorded during the run.
    pub violations: u64,
}

impl RunReport {
    /// Sorted multiset of request paths.
    pub fn workload(&self) -> Vec<String> {
        let mut paths: Vec<String> = self.records.iter().map(|r| r.path.clone()).collect();
        paths.sort();
        paths
    }
}

fn http_client() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().expect("static client config")
}

/// Seconds to wait before retrying after an upstream refusal.
fn backoff(resp: &reqwest::Response) -> Duration {
    let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).and_then(|v| v.parse::<u64>().ok());
    if let Some(secs) = header("retry-after") {
        return Duration::from_secs(secs);
    }
    if let Some(reset) = header("x-ratelimit-reset") {
        let now = crate::scheduler::budget::epoch_secs_f64(std::time::SystemTime::now());
        return Duration::from_secs_f64((reset as f64 - now).max(0.0));
    }
    Duration::from_secs(1)
}

/// One sequential stream per token; streams for different tokens run in
/// parallel. Repositories are dealt to tokens round-robin.
pub async fn run_direct(
    tasks: &[CollectionTask],
    tokens: &[String],
    base_url: &str,
    interval: Duration,
    processing: Duration,
) -> RunReport {
    assert!(!tokens.is_empty());
    let client = http_client();
    let t0 = Instant::now();
    let mut set = JoinSet::new();
    for (i, token) in tokens.iter().enumerate() {
        let mine: Vec<CollectionTask> = tasks.iter().skip(i).step_by(tokens.len()).cloned().collect();
        let client = client.clone();
        let token = token.clone();
        let base = base_url.trim_end_matches('/').to_string();
        set.spawn(async move {
            let mut records = Vec::new();
            let mut retries = 0;
            for task in &mine {
                for path in task.paths() {
                    loop {
                        let start = t0.elapsed();
                        let sent = client
                            .get(format!("{base}{path}"))
                            .header("authorization", format!("token {token}"))
                            .header("user-agent", "ghproxy-bench")
                            .send()
                            .await;
                        let resp = match sent {
                            Ok(r) => r,
                            Err(_) => {
                                retries += 1;
                                tokio::time::sleep(Duration::from_secs(1)).await;
                                continue;
                            }
                        };
                        let status = resp.status();
                        if status == StatusCode::FORBIDDEN || status == StatusCode::TOO_MANY_REQUESTS {
                            retries += 1;
                            let wait = backoff(&resp);
                            let _ = resp.bytes().await;
                            tokio::time::sleep(wait).await;
                            continue;
                        }
                        let _ = resp.bytes().await;
                        records.push(RequestRecord { stream: i, path: path.clone(), start, end: t0.elapsed(), status: status.as_u16() });
                        break;
                    }
                    tokio::time::sleep(processing).await;
                    tokio::time::sleep(interval).await;
                }
            }
            (records, retries)
        });
    }
    let (records, retries) = collect(&mut set).await;
    finish(Mode::Direct, tokens.len(), records, retries, processing, t0)
}

/// `workers_per_token` client workers per token, each keeping up to
/// `max_concurrent` requests open (one chain per repository resource),
/// all sent to the proxy without credentials.
pub async fn run_proxied(
    tasks: &[CollectionTask],
    tokens: usize,
    proxy_url: &str,
    workers_per_token: usize,
    max_concurrent: usize,
    processing: Duration,
) -> RunReport {
    let clients = (tokens * workers_per_token).max(1);
    let client = http_client();
    let t0 = Instant::now();
    let mut set = JoinSet::new();
    for w in 0..clients {
        let mine: Vec<CollectionTask> = tasks.iter().skip(w).step_by(clients).cloned().collect();
        let client = client.clone();
        let base = proxy_url.trim_end_matches('/').to_string();
        set.spawn(async move {
            let permits = Arc::new(Semaphore::new(max_concurrent.max(1)));
            let mut chains = JoinSet::new();
            for task in mine {
                for resource in task.resources.clone() {
                    let task = task.clone();
                    let client = client.clone();
                    let base = base.clone();
                    let permits = Arc::clone(&permits);
                    chains.spawn(async move {
                        let _permit = permits.acquire_owned().await.expect("semaphore never closed");
                        let mut records = Vec::new();
                        let mut retries = 0;
                        for page in 1..=task.pages {
                            let path = task.path(resource, page);
                            loop {
                                let start = t0.elapsed();
                                let sent = client.get(format!("{base}{path}")).header("user-agent", "ghproxy-bench").send().await;
                                match sent {
                                    Ok(resp) if resp.status().is_success() => {
                                        let status = resp.status().as_u16();
                                        let _ = resp.bytes().await;
                                        records.push(RequestRecord { stream: w, path: path.clone(), start, end: t0.elapsed(), status });
                                        break;
                                    }
                                    Ok(resp) => {
                                        retries += 1;
                                        let wait = backoff(&resp);
                                        let _ = resp.bytes().await;
                                        tokio::time::sleep(wait).await;
                                    }
                                    Err(_) => {
                                        retries += 1;
                                        tokio::time::sleep(Duration::from_secs(1)).await;
                                    }
                                }
                            }
                            // runs while the worker's other chains are waiting on the proxy
                            tokio::time::sleep(processing).await;
                        }
                        (records, retries)
                    });
                }
            }
            collect(&mut chains).await
        });
    }
    let (records, retries) = collect(&mut set).await;
    finish(Mode::Proxied, tokens, records, retries, processing, t0)
}

async fn collect(set: &mut JoinSet<(Vec<RequestRecord>, u64)>) -> (Vec<RequestRecord>, u64) {
    let mut records = Vec::new();
    let mut retries = 0;
    while let Some(joined) = set.join_next().await {
        let (r, n) = joined.expect("benchmark client panicked");
        records.extend(r);
        retries += n;
    }
    (records, retries)
}

fn finish(mode: Mode, tokens: usize, mut records: Vec<RequestRecord>, retries: u64, processing: Duration, t0: Instant) -> RunReport {
    let wall = t0.elapsed();
    records.sort_by_key(|r| (r.start, r.stream));
    RunReport { mode, tokens, records, wall, processing, retries, violations: 0 }
}

/// Everything needed for a self-contained benchmark run.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub tokens: usize,
    pub repos: usize,
    pub pages: u32,
    pub processing: Duration,
    pub direct_interval: Duration,
    /// Proxy `request_interval` during the proxied run.
    pub proxy_interval: Duration,
    pub workers_per_token: usize,
    pub max_concurrent: usize,
    pub latency: LatencyProfile,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            tokens: 3,
            repos: 12,
            pages: 5,
            processing: DEFAULT_PROCESSING,
            direct_interval: DEFAULT_DIRECT_INTERVAL,
            proxy_interval: DEFAULT_DIRECT_INTERVAL,
            workers_per_token: WORKERS_PER_TOKEN,
            max_concurrent: MAX_CONCURRENT_PER_WORKER,
            latency: LatencyProfile::default(),
        }
    }
}

impl BenchOptions {
    pub fn token_names(&self) -> Vec<String> {
        (0..self.tokens).map(|i| format!("bench-token-{i:02}")).collect()
    }

    pub fn tasks(&self) -> Vec<CollectionTask> {
        build_tasks(self.repos, self.pages)
    }
}

/// Start a mock upstream at real scale for `options`.
pub async fn start_mock(options: &BenchOptions) -> std::io::Result<MockUpstream> {
    let mut config = MockConfig::with_tokens(options.token_names()).real_scale();
    config.latency = options.latency.clone();
    MockUpstream::spawn(config).await
}

/// Run direct mode against a fresh mock and report its violations.
pub async fn bench_direct(options: &BenchOptions) -> std::io::Result<RunReport> {
    let mock = start_mock(options).await?;
    let mut report =
        run_direct(&options.tasks(), &options.token_names(), &mock.base_url(), options.direct_interval, options.processing).await;
    report.violations = mock.report().violations;
    Ok(report)
}

/// Run proxied mode through an in-process proxy against a fresh mock.
pub async fn bench_proxied(options: &BenchOptions) -> Result<RunReport, String> {
    let mock = start_mock(options).await.map_err(|e| e.to_string())?;
    let config = ProxyConfig {
        tokens: options.token_names(),
        request_interval: options.proxy_interval,
        monitor: false,
        upstream_rest: mock.base_url(),
        upstream_graphql: format!("{}/graphql", mock.base_url()),
        ..ProxyConfig::default()
    };
    let proxy = ProxyServer::launch(
        &config,
        LaunchOptions { bind: Some(([127, 0, 0, 1], 0).into()), ..LaunchOptions::default() },
    )
    .await
    .map_err(|e| e.to_string())?;
    let mut report = run_proxied(
        &options.tasks(),
        options.tokens,
        &proxy.url(),
        options.workers_per_token,
        options.max_concurrent,
        options.processing,
    )
    .await;
    report.violations = mock.report().violations;
    Ok(report)
}

/// Count of records per resource kind.
pub fn per_resource(records: &[RequestRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.resource().to_string()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_paths_cover_every_resource_and_page() {
        let t = CollectionTask::new("o/r", 3);
        let paths = t.paths();
        assert_eq!(paths.len(), 12);
        assert_eq!(paths[0], "/repos/o/r/issues?page=1&per_page=100");
        assert_eq!(paths[11], "/repos/o/r/stargazers?page=3&per_page=100");
    }

    #[test]
    #[should_panic]
    fn zero_pages_rejected() {
        CollectionTask::new("o/r", 0);
    }

    #[test]
    fn default_plan_is_240_requests() {
        let o = BenchOptions::default();
        let n: usize = o.tasks().iter().map(|t| t.paths().len()).sum();
        assert_eq!(n, 240);
    }

    #[test]
    fn resource_of_record() {
        let r = RequestRecord {
            stream: 0,
            path: "/repos/o/r/tags?page=2".into(),
            start: Duration::ZERO,
            end: Duration::from_millis(5),
            status: 200,
        };
        assert_eq!(r.resource(), "tags");
        assert_eq!(r.latency(), Duration::from_millis(5));
    }
}
