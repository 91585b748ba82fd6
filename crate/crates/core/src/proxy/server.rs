use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;

use super::envelope::{RequestEnvelope, UpstreamResponse};
use super::relay::relay_response;
use crate::error::ProxyError;
use crate::scheduler::Pool;

const MAX_BODY: usize = 64 * 1024 * 1024;

/// Router that sends every method and path through the pool.
pub fn proxy_router(pool: Arc<Pool>) -> Router {
    Router::new().fallback(handle_client_request).with_state(pool)
}

/// Read the request, run it through the pool and relay the result.
pub async fn handle_client_request(State(pool): State<Arc<Pool>>, request: Request) -> Response {
    let (parts, body) = request.into_parts();
    let body = match axum::body::to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("cannot read request body: {e}")).into_response(),
    };
    let path_and_query = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    let envelope = RequestEnvelope::new(parts.method, path_and_query, parts.headers, body);
    match pool.submit(envelope).await {
        Ok(reply) => {
            let response = match reply.worker {
                Some(worker) => relay_response(reply.response, reply.service, worker, &pool.snapshots()),
                None => reply.response,
            };
            into_axum(response)
        }
        Err(e) => error_response(&e),
    }
}

fn into_axum(resp: UpstreamResponse) -> Response {
    let mut out = Response::new(Body::from(resp.body));
    *out.status_mut() = resp.status;
    *out.headers_mut() = resp.headers;
    out
}

/// JSON body with a `proxy_error` field, plus `retry-after` when known.
pub fn error_response(err: &ProxyError) -> Response {
    let mut resp = Response::new(Body::from(Bytes::from(err.body().to_string())));
    *resp.status_mut() = err.status();
    resp.headers_mut().insert("content-type", HeaderValue::from_static("application/json"));
    if let ProxyError::PoolExhausted { retry_after: Some(wait) } = err {
        resp.headers_mut().insert("retry-after", HeaderValue::from(wait.as_secs()));
    }
    resp
}
