#![allow(dead_code)]

use std::time::Duration;

use ghproxy_core::app::{LaunchOptions, ProxyServer};
use ghproxy_core::mock::{LatencyProfile, MockConfig, MockUpstream};
use ghproxy_core::ProxyConfig;

pub struct Rig {
    pub mock: MockUpstream,
    pub proxy: ProxyServer,
    pub client: reqwest::Client,
}

pub fn client() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().unwrap()
}

pub fn mock_config(tokens: &[&str]) -> MockConfig {
    let mut cfg = MockConfig::with_tokens(tokens.iter().copied());
    cfg.limit = 5000;
    cfg.window_secs = 3600.0;
    cfg.latency = LatencyProfile::flat(5);
    cfg.abuse_retry_after_secs = 1;
    cfg
}

pub fn proxy_config(mock: &MockUpstream, tokens: &[&str]) -> ProxyConfig {
    ProxyConfig {
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        request_interval: Duration::ZERO,
        request_timeout: Duration::from_secs(10),
        monitor: false,
        upstream_rest: mock.base_url(),
        upstream_graphql: format!("{}/graphql", mock.base_url()),
        ..ProxyConfig::default()
    }
}

pub async fn launch(config: &ProxyConfig) -> ProxyServer {
    let options = LaunchOptions { bind: Some(([127, 0, 0, 1], 0).into()), trace_dispatches: true, log_to_stderr: false };
    ProxyServer::launch(config, options).await.expect("proxy starts")
}

/// Mock plus proxy over the same token set.
pub async fn rig(
    tokens: &[&str],
    tune_mock: impl FnOnce(&mut MockConfig),
    tune_proxy: impl FnOnce(&mut ProxyConfig),
) -> Rig {
    let mut mcfg = mock_config(tokens);
    tune_mock(&mut mcfg);
    let mock = MockUpstream::spawn(mcfg).await.expect("mock starts");
    let mut pcfg = proxy_config(&mock, tokens);
    tune_proxy(&mut pcfg);
    let proxy = launch(&pcfg).await;
    Rig { mock, proxy, client: client() }
}

impl Rig {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.proxy.url(), path)
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.expect("proxy answers")
    }
}

/// True if any two closed intervals in the list overlap.
pub fn overlapping(intervals: &[(std::time::Instant, Option<std::time::Instant>)]) -> usize {
    let mut v: Vec<_> = intervals.iter().map(|(s, e)| (*s, e.unwrap_or(*s))).collect();
    v.sort();
    v.windows(2).filter(|w| w[1].0 < w[0].1).count()
}
