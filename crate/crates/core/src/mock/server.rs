use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use super::ledger::{CallRecord, Ledger, LedgerReport, TokenLedger, WindowBudget};
use super::MockConfig;
use crate::proxy::envelope::{classify_service, RequestEnvelope};
use crate::scheduler::budget::{HEADER_LIMIT, HEADER_REMAINING, HEADER_RESET};
use crate::scheduler::ServiceKind;

/// Body text of the upstream's abuse-detection response.
pub const ABUSE_MESSAGE: &str = "You have triggered an abuse detection mechanism and have been temporarily blocked from content creation. Please retry your request again later";

const DOCS_URL: &str = "https://docs.github.com/rest/overview/resources-in-the-rest-api";

struct MockState {
    config: MockConfig,
    ledger: Mutex<Ledger>,
}

impl MockState {
    fn ledger(&self) -> MutexGuard<'_, Ledger> {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A running mock upstream bound to a local port.
pub struct MockUpstream {
    addr: SocketAddr,
    state: Arc<MockState>,
    task: JoinHandle<()>,
}

impl std::fmt::Debug for MockUpstream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockUpstream").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl MockUpstream {
    /// Bind `127.0.0.1:<config.port>` and start serving.
    pub async fn spawn(config: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", config.port)).await?;
        Self::spawn_on(listener, config)
    }

    pub fn spawn_on(listener: TcpListener, config: MockConfig) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let graphql_limit = config.graphql_limit.unwrap_or(config.limit);
        let tokens = config
            .tokens
            .iter()
            .map(|t| (t.clone(), TokenLedger::new(config.limit, graphql_limit)))
            .collect();
        let anonymous = TokenLedger::new(config.anonymous_limit, config.anonymous_limit);
        let state = Arc::new(MockState {
            config,
            ledger: Mutex::new(Ledger { tokens, anonymous, unknown_token_calls: 0 }),
        });
        let app = Router::new().fallback(handle).with_state(Arc::clone(&state));
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!("mock upstream stopped: {e}");
            }
        });
        Ok(Self { addr, state, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn config(&self) -> &MockConfig {
        &self.state.config
    }

    pub fn report(&self) -> LedgerReport {
        self.state.ledger().report(SystemTime::now())
    }

    /// Clear calls, counters and budgets for every token.
    pub fn reset_ledger(&self) {
        self.state.ledger().reset();
    }

    /// Answer the next `n` calls on `token` with an abuse response.
    pub fn flag_abuse(&self, token: &str, n: u32) {
        if let Some(t) = self.state.ledger().tokens.get_mut(token) {
            t.forced_abuse += n;
        }
    }

    /// From now on answer 401 for `token`.
    pub fn revoke(&self, token: &str) {
        if let Some(t) = self.state.ledger().tokens.get_mut(token) {
            t.revoked = true;
        }
    }

    /// Current remaining budget for `token`, with any due reset applied.
    pub fn remaining(&self, token: &str, service: ServiceKind) -> Option<u64> {
        let mut ledger = self.state.ledger();
        let budget = ledger.tokens.get_mut(token)?.budget_mut(service);
        budget.roll(SystemTime::now());
        Some(budget.remaining)
    }

    pub fn calls(&self, token: &str) -> Vec<CallRecord> {
        self.state.ledger().tokens.get(token).map(|t| t.calls.clone()).unwrap_or_default()
    }

    /// (start, end) of every non-rejected call, per token.
    pub fn intervals(&self) -> BTreeMap<String, Vec<(Instant, Option<Instant>)>> {
        self.state.ledger().intervals()
    }

    pub fn shutdown(self) {
        self.task.abort();
    }
}

/// Closes an open call on drop, so a client that hangs up mid-call still
/// ends the call in the ledger.
struct OpenCall {
    state: Arc<MockState>,
    token: Option<String>,
    index: usize,
    done: bool,
}

impl OpenCall {
    fn finish(mut self) {
        self.close();
    }

    fn close(&mut self) {
        if self.done {
            return;
        }
        self.done = true;
        let mut ledger = self.state.ledger();
        let entry = match &self.token {
            Some(t) => ledger.tokens.get_mut(t),
            None => Some(&mut ledger.anonymous),
        };
        if let Some(t) = entry {
            t.in_flight = t.in_flight.saturating_sub(1);
            if let Some(call) = t.calls.get_mut(self.index) {
                call.end = Some(Instant::now());
            }
        }
    }
}

impl Drop for OpenCall {
    fn drop(&mut self) {
        self.close();
    }
}

/// Deterministic response body for a request.
pub fn synthetic_body(path_and_query: &str, request_body: &[u8]) -> Bytes {
    let (path, query) = path_and_query.split_once('?').unwrap_or((path_and_query, ""));
    if path == crate::proxy::envelope::GRAPHQL_PATH {
        let digest = hex::encode(Sha256::digest(request_body));
        return Bytes::from(serde_json::json!({ "data": { "echo": digest } }).to_string());
    }
    let page: u64 = query
        .split('&')
        .find_map(|kv| kv.strip_prefix("page="))
        .and_then(|p| p.parse().ok())
        .unwrap_or(1);
    let seed = Sha256::digest(format!("{path}#{page}").as_bytes());
    let items: Vec<_> = seed
        .chunks(8)
        .take(1 + (seed[0] % 4) as usize)
        .enumerate()
        .map(|(i, c)| serde_json::json!({ "id": page * 100 + i as u64, "node": hex::encode(c) }))
        .collect();
    Bytes::from(serde_json::json!({ "path": path, "page": page, "items": items }).to_string())
}

fn json(status: StatusCode, headers: HeaderMap, value: serde_json::Value) -> Response {
    let mut resp = (status, headers, value.to_string()).into_response();
    resp.headers_mut().insert("content-type", HeaderValue::from_static("application/json; charset=utf-8"));
    resp
}

fn rate_headers(budget: &WindowBudget, service: ServiceKind, now: SystemTime, window: Duration) -> HeaderMap {
    let mut h = HeaderMap::new();
    h.insert(HEADER_LIMIT, HeaderValue::from(budget.limit));
    h.insert(HEADER_REMAINING, HeaderValue::from(budget.remaining));
    h.insert(HEADER_RESET, HeaderValue::from(budget.reset_epoch(now, window)));
    h.insert("x-ratelimit-used", HeaderValue::from(budget.limit - budget.remaining));
    let resource = match service {
        ServiceKind::Rest => "core",
        ServiceKind::Graphql => "graphql",
    };
    h.insert("x-ratelimit-resource", HeaderValue::from_static(resource));
    h
}

fn abuse_response(retry_after: u64) -> Response {
    let mut h = HeaderMap::new();
    h.insert("retry-after", HeaderValue::from(retry_after));
    json(
        StatusCode::FORBIDDEN,
        h,
        serde_json::json!({ "message": ABUSE_MESSAGE, "documentation_url": format!("{DOCS_URL}#abuse-rate-limits") }),
    )
}

fn unauthorized() -> Response {
    json(
        StatusCode::UNAUTHORIZED,
        HeaderMap::new(),
        serde_json::json!({ "message": "Bad credentials", "documentation_url": DOCS_URL }),
    )
}

fn record(t: &mut TokenLedger, service: ServiceKind, path: &str, status: u16, concurrent: bool) -> usize {
    let now = Instant::now();
    let end = if status == 200 { None } else { Some(now) };
    t.calls.push(CallRecord { service, path: path.to_string(), start: now, end, status, concurrent });
    t.calls.len() - 1
}

async fn handle(State(state): State<Arc<MockState>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let path_and_query = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    if let Some(cmd) = uri.path().strip_prefix("/__mock/") {
        return control(&state, cmd, &method);
    }
    let service = classify_service(uri.path(), &method);
    let envelope = RequestEnvelope::new(method, path_and_query.clone(), headers, Bytes::new());
    let token = envelope.client_token().map(str::to_string);
    let wall = SystemTime::now();
    let window = state.config.window();

    let (open, rate) = {
        let mut guard = state.ledger();
        let ledger = &mut *guard;
        if let Some(t) = &token {
            if !ledger.tokens.contains_key(t) {
                ledger.unknown_token_calls += 1;
                return unauthorized();
            }
        }
        let entry = match &token {
            Some(t) => ledger.tokens.get_mut(t).expect("checked above"),
            None => &mut ledger.anonymous,
        };
        if entry.revoked {
            record(entry, service, &path_and_query, 401, false);
            return unauthorized();
        }
        if token.is_some() && entry.in_flight > 0 {
            entry.violations += 1;
            record(entry, service, &path_and_query, 403, true);
            return abuse_response(state.config.abuse_retry_after_secs);
        }
        if entry.forced_abuse > 0 {
            entry.forced_abuse -= 1;
            record(entry, service, &path_and_query, 403, false);
            return abuse_response(state.config.abuse_retry_after_secs);
        }
        let budget = entry.budget_mut(service);
        if !budget.spend(wall, window) {
            let h = rate_headers(budget, service, wall, window);
            record(entry, service, &path_and_query, 403, false);
            return json(
                StatusCode::FORBIDDEN,
                h,
                serde_json::json!({ "message": "API rate limit exceeded", "documentation_url": format!("{DOCS_URL}#rate-limiting") }),
            );
        }
        let rate = rate_headers(budget, service, wall, window);
        entry.in_flight += 1;
        let index = record(entry, service, &path_and_query, 200, false);
        (OpenCall { state: Arc::clone(&state), token: token.clone(), index, done: false }, rate)
    };

    let delay = state.config.latency.latency_for(&path_and_query);
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let payload = synthetic_body(&path_and_query, &body);
    open.finish();
    let mut resp = (StatusCode::OK, rate, payload).into_response();
    resp.headers_mut().insert("content-type", HeaderValue::from_static("application/json; charset=utf-8"));
    resp
}

fn control(state: &MockState, cmd: &str, method: &Method) -> Response {
    match (method, cmd) {
        (&Method::GET, "ledger") => {
            let report = state.ledger().report(SystemTime::now());
            json(StatusCode::OK, HeaderMap::new(), serde_json::to_value(report).unwrap_or_default())
        }
        (&Method::POST, "reset") => {
            state.ledger().reset();
            StatusCode::NO_CONTENT.into_response()
        }
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}
