//! Sending a normalized request to the upstream API.

use std::time::Duration;

use bytes::Bytes;
use http::{HeaderMap, StatusCode};
use reqwest::Url;

use super::envelope::{strip_hop_headers, RequestEnvelope, UpstreamResponse};
use crate::error::ProxyError;
use crate::scheduler::budget::HEADER_REMAINING;
use crate::scheduler::ServiceKind;

pub const GITHUB_REST_URL: &str = "https://api.github.com";
pub const GITHUB_GRAPHQL_URL: &str = "https://api.github.com/graphql";

/// Where each service lives upstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamTarget {
    rest_base: Url,
    graphql_url: Url,
}

impl UpstreamTarget {
    pub fn new(rest_base: &str, graphql_url: &str) -> Result<Self, String> {
        let parse = |s: &str| -> Result<Url, String> {
            let url = Url::parse(s).map_err(|e| format!("`{s}` is not an absolute URL: {e}"))?;
            if url.cannot_be_a_base() || !matches!(url.scheme(), "http" | "https") {
                return Err(format!("`{s}` is not an http(s) URL"));
            }
            Ok(url)
        };
        Ok(Self { rest_base: parse(rest_base)?, graphql_url: parse(graphql_url)? })
    }

    pub fn github() -> Self {
        Self::new(GITHUB_REST_URL, GITHUB_GRAPHQL_URL).expect("static URLs parse")
    }

    /// Both services on one origin, GraphQL at `/graphql`.
    pub fn single_origin(base: &str) -> Result<Self, String> {
        let base = base.trim_end_matches('/');
        Self::new(base, &format!("{base}/graphql"))
    }

    pub fn url_for(&self, service: ServiceKind, path_and_query: &str) -> String {
        match service {
            ServiceKind::Graphql => {
                let mut url = self.graphql_url.clone();
                if let Some((_, q)) = path_and_query.split_once('?') {
                    url.set_query(Some(q));
                }
                url.to_string()
            }
            ServiceKind::Rest => {
                let base = self.rest_base.as_str().trim_end_matches('/');
                format!("{base}{path_and_query}")
            }
        }
    }
}

/// HTTP client bound to an upstream target.
#[derive(Debug, Clone)]
pub struct Upstream {
    client: reqwest::Client,
    target: UpstreamTarget,
}

impl Upstream {
    pub fn new(target: UpstreamTarget) -> Self {
        let client = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(10))
            .pool_max_idle_per_host(64)
            .build()
            .expect("reqwest client builds with static settings");
        Self { client, target }
    }

    pub fn target(&self) -> &UpstreamTarget {
        &self.target
    }

    /// Send the request and read the whole response, giving up after `timeout`.
    pub async fn forward(
        &self,
        envelope: RequestEnvelope,
        service: ServiceKind,
        timeout: Duration,
    ) -> Result<UpstreamResponse, ProxyError> {
        let url = self.target.url_for(service, &envelope.path_and_query);
        let mut headers = envelope.headers;
        strip_hop_headers(&mut headers);
        let request = self.client.request(envelope.method, url).headers(headers).body(envelope.body);
        let exchange = async {
            let resp = request.send().await?;
            let status = resp.status();
            let mut headers = resp.headers().clone();
            let body = resp.bytes().await?;
            strip_hop_headers(&mut headers);
            Ok::<_, reqwest::Error>(UpstreamResponse::new(status, headers, body))
        };
        match tokio::time::timeout(timeout, exchange).await {
            Err(_) => Err(ProxyError::Timeout),
            Ok(Err(e)) if e.is_timeout() => Err(ProxyError::Timeout),
            Ok(Err(e)) => Err(ProxyError::Unreachable(e.without_url().to_string())),
            Ok(Ok(resp)) => Ok(resp),
        }
    }
}

/// What an upstream response means for the token that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Success,
    /// Token rejected (401).
    Unauthorized,
    /// Secondary limit / abuse detection; back off for `retry_after` if given.
    Abuse { retry_after: Option<Duration> },
    /// Primary budget is spent.
    RateLimited,
}

pub fn classify_response(status: StatusCode, headers: &HeaderMap, body: &Bytes) -> Verdict {
    if status == StatusCode::UNAUTHORIZED {
        return Verdict::Unauthorized;
    }
    if status != StatusCode::FORBIDDEN && status != StatusCode::TOO_MANY_REQUESTS {
        return Verdict::Success;
    }
    let retry_after = headers
        .get(http::header::RETRY_AFTER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_secs);
    let text = String::from_utf8_lossy(body).to_ascii_lowercase();
    if text.contains("abuse detection") || text.contains("secondary rate limit") {
        return Verdict::Abuse { retry_after };
    }
    let exhausted = headers
        .get(HEADER_REMAINING)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.trim() == "0");
    if exhausted {
        Verdict::RateLimited
    } else if retry_after.is_some() {
        Verdict::Abuse { retry_after }
    } else {
        Verdict::Success
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use http::HeaderValue;

    #[test]
    fn urls_per_service() {
        let t = UpstreamTarget::single_origin("http://127.0.0.1:9000/").unwrap();
        assert_eq!(t.url_for(ServiceKind::Rest, "/repos/a/b?page=2"), "http://127.0.0.1:9000/repos/a/b?page=2");
        assert_eq!(t.url_for(ServiceKind::Graphql, "/graphql"), "http://127.0.0.1:9000/graphql");
        let gh = UpstreamTarget::github();
        assert_eq!(gh.url_for(ServiceKind::Graphql, "/graphql"), GITHUB_GRAPHQL_URL);
    }

    #[test]
    fn relative_or_odd_targets_rejected() {
        assert!(UpstreamTarget::new("/api", GITHUB_GRAPHQL_URL).is_err());
        assert!(UpstreamTarget::new(GITHUB_REST_URL, "ftp://x/graphql").is_err());
    }

    #[test]
    fn verdicts() {
        let none = HeaderMap::new();
        assert_eq!(classify_response(StatusCode::OK, &none, &Bytes::new()), Verdict::Success);
        assert_eq!(classify_response(StatusCode::UNAUTHORIZED, &none, &Bytes::new()), Verdict::Unauthorized);

        let abuse = Bytes::from_static(b"{\"message\":\"You have triggered an abuse detection mechanism\"}");
        let mut h = HeaderMap::new();
        h.insert("retry-after", HeaderValue::from_static("7"));
        assert_eq!(
            classify_response(StatusCode::FORBIDDEN, &h, &abuse),
            Verdict::Abuse { retry_after: Some(Duration::from_secs(7)) }
        );
        assert_eq!(
            classify_response(StatusCode::FORBIDDEN, &none, &abuse),
            Verdict::Abuse { retry_after: None }
        );

        let mut rl = HeaderMap::new();
        rl.insert(HEADER_REMAINING, HeaderValue::from_static("0"));
        let msg = Bytes::from_static(b"{\"message\":\"API rate limit exceeded\"}");
        assert_eq!(classify_response(StatusCode::FORBIDDEN, &rl, &msg), Verdict::RateLimited);
        // plain permission error is the client's business
        assert_eq!(classify_response(StatusCode::FORBIDDEN, &none, &Bytes::from_static(b"nope")), Verdict::Success);
    }
}
