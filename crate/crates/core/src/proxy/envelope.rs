//! Request and response envelopes plus the two header rules the proxy applies:
//! service classification and token/user-agent fill-in.

use bytes::Bytes;
use http::header::{AUTHORIZATION, USER_AGENT};
use http::{HeaderMap, HeaderName, HeaderValue, Method, StatusCode};

use crate::scheduler::ServiceKind;

pub const GRAPHQL_PATH: &str = "/graphql";
pub const DEFAULT_USER_AGENT: &str = concat!("ghproxy/", env!("CARGO_PKG_VERSION"));

/// Method, target, headers and body of one client request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestEnvelope {
    pub method: Method,
    /// Path plus optional query string, e.g. `/repos/a/b/issues?page=2`.
    pub path_and_query: String,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl RequestEnvelope {
    pub fn new(method: Method, path_and_query: impl Into<String>, headers: HeaderMap, body: Bytes) -> Self {
        Self { method, path_and_query: path_and_query.into(), headers, body }
    }

    pub fn get(path_and_query: impl Into<String>) -> Self {
        Self::new(Method::GET, path_and_query, HeaderMap::new(), Bytes::new())
    }

    pub fn path(&self) -> &str {
        self.path_and_query.split('?').next().unwrap_or("")
    }

    /// Secret carried in the `authorization` header, if any (`token X` or `bearer X`).
    pub fn client_token(&self) -> Option<&str> {
        let raw = self.headers.get(AUTHORIZATION)?.to_str().ok()?.trim();
        let (scheme, secret) = raw.split_once(' ')?;
        if scheme.eq_ignore_ascii_case("token") || scheme.eq_ignore_ascii_case("bearer") {
            let secret = secret.trim();
            (!secret.is_empty()).then_some(secret)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamResponse {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl UpstreamResponse {
    pub fn new(status: StatusCode, headers: HeaderMap, body: Bytes) -> Self {
        Self { status, headers, body }
    }
}

/// Exact-path match on the GraphQL endpoint; everything else is REST.
pub fn classify_service(path: &str, _method: &Method) -> ServiceKind {
    let path = path.split('?').next().unwrap_or(path);
    if path == GRAPHQL_PATH {
        ServiceKind::Graphql
    } else {
        ServiceKind::Rest
    }
}

/// Fill `authorization` and `user-agent` when the client left them out.
/// Everything else, body included, passes through untouched.
pub fn normalize_request(mut envelope: RequestEnvelope, worker_secret: &str, default_user_agent: &str) -> RequestEnvelope {
    if !envelope.headers.contains_key(AUTHORIZATION) {
        if let Ok(v) = HeaderValue::from_str(&format!("token {worker_secret}")) {
            envelope.headers.insert(AUTHORIZATION, v);
        }
    }
    if !envelope.headers.contains_key(USER_AGENT) {
        if let Ok(v) = HeaderValue::from_str(default_user_agent) {
            envelope.headers.insert(USER_AGENT, v);
        }
    }
    envelope
}

const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

/// Drop hop-by-hop headers plus `host` and `content-length`, which the next
/// hop recomputes.
pub fn strip_hop_headers(headers: &mut HeaderMap) {
    for name in HOP_BY_HOP.iter().chain(["host", "content-length"].iter()) {
        headers.remove(HeaderName::from_static(name));
    }
}
