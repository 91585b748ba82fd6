//! Proxy settings assembled from flags, environment and an optional config
//! file. Precedence: flags, then environment, then file, then defaults.
//!
//! The file is plain `key = value` lines; keys are the long flag names
//! without the leading dashes (`request-interval = 250ms`).

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use tracing::warn;

use crate::error::ConfigError;
use crate::observe::mask_token;
use crate::proxy::forward::{UpstreamTarget, GITHUB_GRAPHQL_URL, GITHUB_REST_URL};
use crate::proxy::DEFAULT_USER_AGENT;
use crate::scheduler::budget::AUTHENTICATED_HOURLY_LIMIT;
use crate::scheduler::{SchedulerSettings, ServiceKind};

pub const DEFAULT_PORT: u16 = 3000;
pub const DEFAULT_REQUEST_INTERVAL: Duration = Duration::from_millis(250);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(20);
pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(15);

pub const ENV_TOKENS: &str = "GPS_TOKENS";
pub const ENV_API: &str = "GPS_API";
pub const ENV_REQUEST_INTERVAL: &str = "GPS_REQUEST_INTERVAL_MS";
pub const ENV_REQUEST_TIMEOUT: &str = "GPS_REQUEST_TIMEOUT_MS";
pub const ENV_MIN_REMAINING: &str = "GPS_MIN_REMAINING";
pub const ENV_PORT: &str = "GPS_PORT";
pub const ENV_CLUSTERING: &str = "GPS_CLUSTERING";
pub const ENV_UPSTREAM_REST: &str = "UPSTREAM_REST_URL";
pub const ENV_UPSTREAM_GRAPHQL: &str = "UPSTREAM_GRAPHQL_URL";

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub tokens: Vec<String>,
    /// Service shown by the monitor; requests of both kinds are always accepted.
    pub api: ServiceKind,
    pub request_interval: Duration,
    pub request_timeout: Duration,
    pub min_remaining: u64,
    pub clustering: bool,
    pub peers: Vec<String>,
    pub instance_id: Option<String>,
    pub cluster_listen: Option<String>,
    pub lease_ttl: Duration,
    pub port: u16,
    pub queue_cap: Option<usize>,
    pub monitor: bool,
    pub log_file: Option<PathBuf>,
    /// Budget assumed per token before the upstream reports one.
    pub token_limit: u64,
    pub user_agent: String,
    pub upstream_rest: String,
    pub upstream_graphql: String,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            api: ServiceKind::Graphql,
            request_interval: DEFAULT_REQUEST_INTERVAL,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            min_remaining: 0,
            clustering: false,
            peers: Vec::new(),
            instance_id: None,
            cluster_listen: None,
            lease_ttl: DEFAULT_LEASE_TTL,
            port: DEFAULT_PORT,
            queue_cap: None,
            monitor: true,
            log_file: None,
            token_limit: AUTHENTICATED_HOURLY_LIMIT,
            user_agent: DEFAULT_USER_AGENT.to_string(),
            upstream_rest: GITHUB_REST_URL.to_string(),
            upstream_graphql: GITHUB_GRAPHQL_URL.to_string(),
        }
    }
}

impl ProxyConfig {
    pub fn scheduler_settings(&self) -> SchedulerSettings {
        SchedulerSettings {
            request_interval: self.request_interval,
            request_timeout: self.request_timeout,
            min_remaining: self.min_remaining,
            queue_cap: self.queue_cap,
            initial_limit: self.token_limit,
            user_agent: self.user_agent.clone(),
            trace_dispatches: false,
        }
    }

    pub fn upstream_target(&self) -> Result<UpstreamTarget, ConfigError> {
        UpstreamTarget::new(&self.upstream_rest, &self.upstream_graphql)
            .map_err(|reason| ConfigError::invalid("upstream", format!("{} / {}", self.upstream_rest, self.upstream_graphql), reason))
    }

    /// Render as a config file that `parse_config` reads back to `self`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("tokens", self.tokens.join(","));
        kv("api", self.api.to_string());
        kv("request-interval", format!("{}ms", self.request_interval.as_millis()));
        kv("request-timeout", format!("{}ms", self.request_timeout.as_millis()));
        kv("min-remaining", self.min_remaining.to_string());
        kv("clustering", self.clustering.to_string());
        kv("peers", self.peers.join(","));
        if let Some(id) = &self.instance_id {
            kv("instance-id", id.clone());
        }
        if let Some(addr) = &self.cluster_listen {
            kv("cluster-listen", addr.clone());
        }
        kv("lease-ttl", format!("{}ms", self.lease_ttl.as_millis()));
        kv("port", self.port.to_string());
        if let Some(cap) = self.queue_cap {
            kv("queue-cap", cap.to_string());
        }
        kv("no-monitor", (!self.monitor).to_string());
        if let Some(p) = &self.log_file {
            kv("log-file", p.display().to_string());
        }
        kv("token-limit", self.token_limit.to_string());
        kv("user-agent", self.user_agent.clone());
        kv("upstream-rest", self.upstream_rest.clone());
        kv("upstream-graphql", self.upstream_graphql.clone());
        out
    }
}

/// Proxy flags. Every field is optional so that unset flags fall through to
/// the environment and the config file.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "ghproxy", version, about = "Token-pool proxy for the GitHub REST and GraphQL APIs")]
pub struct ProxyArgs {
    /// Access tokens, comma-separated or repeated [env: GPS_TOKENS]
    #[arg(short = 't', long = "tokens", alias = "token", value_delimiter = ',', value_name = "TOKEN")]
    pub tokens: Vec<String>,

    /// API whose budget the monitor shows: rest | graphql [default: graphql] [env: GPS_API]
    #[arg(long, value_name = "API")]
    pub api: Option<String>,

    /// Minimum time between two dispatches on one token, e.g. 250, 250ms, 1s [default: 250ms] [env: GPS_REQUEST_INTERVAL_MS]
    #[arg(long, value_name = "DURATION")]
    pub request_interval: Option<String>,

    /// Abort a request after this long [default: 20s] [env: GPS_REQUEST_TIMEOUT_MS]
    #[arg(long, value_name = "DURATION")]
    pub request_timeout: Option<String>,

    /// Requests left unspent on every token [default: 0] [env: GPS_MIN_REMAINING]
    #[arg(long, value_name = "COUNT")]
    pub min_remaining: Option<String>,

    /// Share the token pool with other instances [default: off] [env: GPS_CLUSTERING]
    #[arg(long)]
    pub clustering: bool,

    /// Other cluster instances, host:port of their cluster listeners
    #[arg(long, value_delimiter = ',', value_name = "HOST:PORT")]
    pub peers: Vec<String>,

    /// Name of this instance in the cluster [default: cluster listen address]
    #[arg(long, value_name = "ID")]
    pub instance_id: Option<String>,

    /// Address for cluster messages [default: 127.0.0.1:<port + 1000>]
    #[arg(long, value_name = "HOST:PORT")]
    pub cluster_listen: Option<String>,

    /// Token lease lifetime in cluster mode [default: 15s]
    #[arg(long, value_name = "DURATION")]
    pub lease_ttl: Option<String>,

    /// Listen port [default: 3000] [env: GPS_PORT]
    #[arg(short = 'p', long, value_name = "PORT")]
    pub port: Option<String>,

    /// Reject requests with 503 once this many are waiting [default: unbounded]
    #[arg(long, value_name = "COUNT")]
    pub queue_cap: Option<String>,

    /// Disable the live activity monitor
    #[arg(long)]
    pub no_monitor: bool,

    /// Write request logs here [default: stderr]
    #[arg(long, value_name = "PATH")]
    pub log_file: Option<PathBuf>,

    /// Budget assumed per token until the upstream reports one [default: 5000]
    #[arg(long, value_name = "COUNT")]
    pub token_limit: Option<String>,

    /// User-agent set on requests that carry none
    #[arg(long, value_name = "UA")]
    pub user_agent: Option<String>,

    /// REST API base URL [default: https://api.github.com] [env: UPSTREAM_REST_URL]
    #[arg(long, value_name = "URL")]
    pub upstream_rest: Option<String>,

    /// GraphQL endpoint URL [default: https://api.github.com/graphql] [env: UPSTREAM_GRAPHQL_URL]
    #[arg(long, value_name = "URL")]
    pub upstream_graphql: Option<String>,

    /// Read settings from a key = value file
    #[arg(short = 'c', long = "config", value_name = "PATH")]
    pub config: Option<PathBuf>,
}

/// Parse a duration: bare integers are milliseconds; `ms`, `s` and `m`
/// suffixes are accepted.
pub fn parse_duration(text: &str) -> Result<Duration, String> {
    let t = text.trim();
    let (num, scale) = if let Some(n) = t.strip_suffix("ms") {
        (n, 1e-3)
    } else if let Some(n) = t.strip_suffix('s') {
        (n, 1.0)
    } else if let Some(n) = t.strip_suffix('m') {
        (n, 60.0)
    } else {
        (t, 1e-3)
    };
    let value: f64 = num.trim().parse().map_err(|_| format!("`{text}` is not a duration"))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("`{text}` is not a non-negative duration"));
    }
    Ok(Duration::from_secs_f64(value * scale))
}

fn parse_bool(text: &str) -> Result<bool, String> {
    match text.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

/// `key = value` pairs from a config file.
fn parse_file(text: &str) -> Result<HashMap<String, String>, ConfigError> {
    const KEYS: [&str; 18] = [
        "tokens", "api", "request-interval", "request-timeout", "min-remaining", "clustering", "peers",
        "instance-id", "cluster-listen", "lease-ttl", "port", "queue-cap", "no-monitor", "log-file",
        "token-limit", "user-agent", "upstream-rest", "upstream-graphql",
    ];
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::File { line: i + 1, reason: format!("expected `key = value`, got `{line}`") })?;
        let key = key.trim().trim_start_matches('-').replace('_', "-").to_ascii_lowercase();
        let key = if key == "token" { "tokens".to_string() } else { key };
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::File { line: i + 1, reason: format!("unknown key `{key}`") });
        }
        let value = value.trim().trim_matches('"').to_string();
        if key == "tokens" {
            let merged: &mut String = out.entry(key).or_default();
            if !merged.is_empty() {
                merged.push(',');
            }
            merged.push_str(&value);
        } else {
            out.insert(key, value);
        }
    }
    Ok(out)
}

/// One setting looked up across the three sources, with the name of the
/// source it came from (for error messages).
struct Layers<'a> {
    env: &'a HashMap<String, String>,
    file: HashMap<String, String>,
}

impl Layers<'_> {
    fn pick(&self, flag_name: &str, flag: Option<&String>, env_name: Option<&str>) -> Option<(String, String)> {
        if let Some(v) = flag {
            return Some((format!("--{flag_name}"), v.clone()));
        }
        if let Some(name) = env_name {
            if let Some(v) = self.env.get(name).filter(|v| !v.trim().is_empty()) {
                return Some((name.to_string(), v.clone()));
            }
        }
        self.file.get(flag_name).map(|v| (format!("config file key `{flag_name}`"), v.clone()))
    }
}

fn convert<T>(picked: Option<(String, String)>, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
    match picked {
        None => Ok(None),
        Some((source, value)) => parse(&value).map(Some).map_err(|reason| ConfigError::invalid(source, value, reason)),
    }
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("`{s}` is not a valid number"))
}

/// Merge flags, environment and file contents into a validated config.
/// Returns warnings (such as dropped duplicate tokens) alongside.
pub fn resolve(
    args: &ProxyArgs,
    env: &HashMap<String, String>,
    file_text: Option<&str>,
) -> Result<(ProxyConfig, Vec<String>), ConfigError> {
    let file = file_text.map(parse_file).transpose()?.unwrap_or_default();
    let layers = Layers { env, file };
    let d = ProxyConfig::default();
    let mut warnings = Vec::new();

    let raw_tokens: Vec<String> = if !args.tokens.is_empty() {
        args.tokens.iter().flat_map(|t| split_list(t)).collect()
    } else if let Some(v) = env.get(ENV_TOKENS).filter(|v| !v.trim().is_empty()) {
        split_list(v)
    } else {
        layers.file.get("tokens").map(|v| split_list(v)).unwrap_or_default()
    };
    let mut tokens: Vec<String> = Vec::new();
    for t in raw_tokens {
        if tokens.contains(&t) {
            warnings.push(format!("duplicate token {} ignored", mask_token(&t)));
        } else {
            tokens.push(t);
        }
    }
    if tokens.is_empty() {
        return Err(ConfigError::NoTokens);
    }

    let flag_bool = |set: bool| set.then(|| "true".to_string());
    let clustering_flag = flag_bool(args.clustering);
    let no_monitor_flag = flag_bool(args.no_monitor);
    let log_file_flag = args.log_file.as_ref().map(|p| p.display().to_string());
    let peers_flag = (!args.peers.is_empty()).then(|| args.peers.join(","));

    let cfg = ProxyConfig {
        tokens,
        api: convert(layers.pick("api", args.api.as_ref(), Some(ENV_API)), |s| s.parse())?.unwrap_or(d.api),
        request_interval: convert(
            layers.pick("request-interval", args.request_interval.as_ref(), Some(ENV_REQUEST_INTERVAL)),
            parse_duration,
        )?
        .unwrap_or(d.request_interval),
        request_timeout: convert(
            layers.pick("request-timeout", args.request_timeout.as_ref(), Some(ENV_REQUEST_TIMEOUT)),
            parse_duration,
        )?
        .unwrap_or(d.request_timeout),
        min_remaining: convert(layers.pick("min-remaining", args.min_remaining.as_ref(), Some(ENV_MIN_REMAINING)), parse_int)?
            .unwrap_or(d.min_remaining),
        clustering: convert(layers.pick("clustering", clustering_flag.as_ref(), Some(ENV_CLUSTERING)), parse_bool)?
            .unwrap_or(d.clustering),
        peers: layers.pick("peers", peers_flag.as_ref(), None).map(|(_, v)| split_list(&v)).unwrap_or_default(),
        instance_id: layers.pick("instance-id", args.instance_id.as_ref(), None).map(|(_, v)| v),
        cluster_listen: layers.pick("cluster-listen", args.cluster_listen.as_ref(), None).map(|(_, v)| v),
        lease_ttl: convert(layers.pick("lease-ttl", args.lease_ttl.as_ref(), None), parse_duration)?.unwrap_or(d.lease_ttl),
        port: convert(layers.pick("port", args.port.as_ref(), Some(ENV_PORT)), parse_int)?.unwrap_or(d.port),
        queue_cap: convert(layers.pick("queue-cap", args.queue_cap.as_ref(), None), parse_int)?,
        monitor: !convert(layers.pick("no-monitor", no_monitor_flag.as_ref(), None), parse_bool)?.unwrap_or(!d.monitor),
        log_file: layers.pick("log-file", log_file_flag.as_ref(), None).map(|(_, v)| PathBuf::from(v)),
        token_limit: convert(layers.pick("token-limit", args.token_limit.as_ref(), None), parse_int)?.unwrap_or(d.token_limit),
        user_agent: layers.pick("user-agent", args.user_agent.as_ref(), None).map_or(d.user_agent, |(_, v)| v),
        upstream_rest: layers
            .pick("upstream-rest", args.upstream_rest.as_ref(), Some(ENV_UPSTREAM_REST))
            .map_or(d.upstream_rest, |(_, v)| v),
        upstream_graphql: layers
            .pick("upstream-graphql", args.upstream_graphql.as_ref(), Some(ENV_UPSTREAM_GRAPHQL))
            .map_or(d.upstream_graphql, |(_, v)| v),
    };

    if cfg.request_timeout.is_zero() {
        return Err(ConfigError::invalid("request-timeout", "0", "must be greater than zero"));
    }
    if cfg.min_remaining >= cfg.token_limit {
        return Err(ConfigError::invalid(
            "min-remaining",
            cfg.min_remaining.to_string(),
            format!("must be below the per-token limit ({})", cfg.token_limit),
        ));
    }
    if cfg.lease_ttl.is_zero() {
        return Err(ConfigError::invalid("lease-ttl", "0", "must be greater than zero"));
    }
    cfg.upstream_target()?;
    Ok((cfg, warnings))
}

/// Parse argv and environment, reading the `--config` file if one is named.
pub fn parse_config<I, T>(argv: I, env: &HashMap<String, String>) -> Result<(ProxyConfig, Vec<String>), ConfigError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = ProxyArgs::try_parse_from(argv)?;
    config_from_args(&args, env)
}

pub fn config_from_args(args: &ProxyArgs, env: &HashMap<String, String>) -> Result<(ProxyConfig, Vec<String>), ConfigError> {
    let text = match &args.config {
        Some(path) => Some(
            std::fs::read_to_string(path).map_err(|err| ConfigError::Io { path: path.display().to_string(), err })?,
        ),
        None => None,
    };
    let (cfg, warnings) = resolve(args, env, text.as_deref())?;
    for w in &warnings {
        warn!("{w}");
    }
    Ok((cfg, warnings))
}
