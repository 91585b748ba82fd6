//! Start a complete proxy (pool, HTTP listener, optional cluster member and
//! monitor) from a `ProxyConfig`.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracing::{error, info};

use crate::cluster::{ClusterNode, ClusterSettings};
use crate::config::ProxyConfig;
use crate::error::ConfigError;
use crate::observe::monitor::REFRESH;
use crate::observe::{render_monitor, ActivityLog, MonitorSummary, DEFAULT_RING_CAPACITY};
use crate::proxy::{proxy_router, Upstream};
use crate::scheduler::Pool;

/// Window the monitor summarizes status classes over.
pub const MONITOR_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Default)]
pub struct LaunchOptions {
    /// Listen here instead of `0.0.0.0:<port>`.
    pub bind: Option<SocketAddr>,
    /// Keep every dispatch instant (audits and tests).
    pub trace_dispatches: bool,
    /// Write request log lines to stderr when no log file is configured.
    pub log_to_stderr: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot listen on {addr}: {err}")]
    Bind { addr: String, err: io::Error },
}

/// A running proxy. Dropping it stops every task it started.
pub struct ProxyServer {
    addr: SocketAddr,
    pool: Arc<Pool>,
    cluster: Option<ClusterNode>,
    listener: Option<JoinHandle<()>>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for ProxyServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProxyServer").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Drop for ProxyServer {
    fn drop(&mut self) {
        for t in self.tasks.iter().chain(&self.listener) {
            t.abort();
        }
    }
}

impl ProxyServer {
    pub async fn launch(config: &ProxyConfig, options: LaunchOptions) -> Result<Self, LaunchError> {
        let sink: Option<Box<dyn Write + Send>> = match &config.log_file {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|err| ConfigError::Io { path: path.display().to_string(), err })?;
                Some(Box::new(file))
            }
            None if options.log_to_stderr => Some(Box::new(io::stderr())),
            None => None,
        };
        let activity = Arc::new(ActivityLog::new(DEFAULT_RING_CAPACITY, sink));
        let mut settings = config.scheduler_settings();
        settings.trace_dispatches = options.trace_dispatches;
        let upstream = Upstream::new(config.upstream_target()?);
        let pool = Pool::new(config.tokens.clone(), settings, upstream, activity).map_err(|_| ConfigError::NoTokens)?;

        let bind = options.bind.unwrap_or_else(|| SocketAddr::from(([0, 0, 0, 0], config.port)));
        let listener = TcpListener::bind(bind).await.map_err(|err| LaunchError::Bind { addr: bind.to_string(), err })?;
        let addr = listener.local_addr().map_err(|err| LaunchError::Bind { addr: bind.to_string(), err })?;

        let cluster = if config.clustering {
            let listen_text = config.cluster_listen.clone().unwrap_or_else(|| format!("127.0.0.1:{}", addr.port() as u32 + 1000));
            let listen: SocketAddr = listen_text
                .parse()
                .map_err(|_| ConfigError::invalid("--cluster-listen", listen_text.clone(), "expected host:port"))?;
            let settings = ClusterSettings {
                instance_id: config.instance_id.clone().unwrap_or_else(|| listen.to_string()),
                listen,
                peers: config.peers.clone(),
                lease_ttl: config.lease_ttl,
            };
            Some(
                ClusterNode::start(Arc::clone(&pool), settings)
                    .await
                    .map_err(|err| LaunchError::Bind { addr: listen_text, err })?,
            )
        } else {
            None
        };

        let mut tasks = pool.start();
        let router = proxy_router(Arc::clone(&pool));
        let listener = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, router).await {
                error!("proxy listener stopped: {e}");
            }
        });
        if config.monitor {
            tasks.push(tokio::spawn(run_monitor(Arc::clone(&pool), config.api)));
        }
        info!(%addr, tokens = pool.workers().len(), "proxy listening");
        Ok(Self { addr, pool, cluster, listener: Some(listener), tasks })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn pool(&self) -> &Arc<Pool> {
        &self.pool
    }

    pub fn cluster(&self) -> Option<&ClusterNode> {
        self.cluster.as_ref()
    }

    /// Wait until the listener task ends (normally never).
    pub async fn serve_forever(mut self) {
        if let Some(listener) = self.listener.take() {
            let _ = listener.await;
        }
    }
}

async fn run_monitor(pool: Arc<Pool>, service: crate::scheduler::ServiceKind) {
    let mut tick = tokio::time::interval(REFRESH);
    loop {
        tick.tick().await;
        let summary = MonitorSummary {
            service,
            window: MONITOR_WINDOW,
            counts: pool.activity().summarize(MONITOR_WINDOW, Instant::now()),
            workers: pool.worker_views(service),
        };
        // clear screen, home cursor
        let frame = format!("\x1b[2J\x1b[H{}", render_monitor(&summary));
        let mut out = io::stdout().lock();
        let _ = out.write_all(frame.as_bytes());
        let _ = out.flush();
    }
}
