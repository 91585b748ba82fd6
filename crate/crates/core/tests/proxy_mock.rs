mod common;

use std::time::{Duration, Instant};

use common::{overlapping, rig};
use ghproxy_core::mock::{synthetic_body, ABUSE_MESSAGE};
use ghproxy_core::proxy::HEADER_PROXY_WORKER;
use ghproxy_core::{WorkerId, WorkerStatus};

async fn fan_out(r: &common::Rig, n: usize, path: impl Fn(usize) -> String) -> Vec<(u16, String, Option<String>)> {
    let mut set = tokio::task::JoinSet::new();
    for i in 0..n {
        let client = r.client.clone();
        let url = r.url(&path(i));
        set.spawn(async move {
            let resp = client.get(url).send().await.unwrap();
            let status = resp.status().as_u16();
            let worker = resp.headers().get(HEADER_PROXY_WORKER).map(|v| v.to_str().unwrap().to_string());
            (status, resp.text().await.unwrap(), worker)
        });
    }
    let mut out = Vec::new();
    while let Some(r) = set.join_next().await {
        out.push(r.unwrap());
    }
    out
}

#[tokio::test]
async fn six_parallel_requests_on_one_token_never_overlap() {
    let r = rig(&["only"], |m| m.latency = ghproxy_core::mock::LatencyProfile::flat(30), |_| {}).await;
    let out = fan_out(&r, 6, |i| format!("/repos/o/r/issues?page={i}")).await;
    assert!(out.iter().all(|(s, _, _)| *s == 200), "{out:?}");
    let report = r.mock.report();
    assert_eq!(report.violations, 0);
    assert_eq!(report.token("only").accepted, 6);
    assert_eq!(overlapping(&r.mock.intervals()["only"]), 0);
}

#[tokio::test]
async fn thirty_requests_spread_over_three_tokens() {
    let tokens = ["t-a", "t-b", "t-c"];
    let r = rig(&tokens, |m| m.latency = ghproxy_core::mock::LatencyProfile::flat(20), |_| {}).await;
    let out = fan_out(&r, 30, |i| format!("/repos/o/r/tags?page={i}")).await;
    assert!(out.iter().all(|(s, _, _)| *s == 200));
    let report = r.mock.report();
    assert_eq!(report.violations, 0);
    for t in tokens {
        assert!(report.token(t).accepted > 0, "token {t} unused");
        assert_eq!(overlapping(&r.mock.intervals()[t]), 0);
    }
    assert_eq!(report.per_token.values().map(|t| t.accepted).sum::<u64>(), 30);
}

#[tokio::test]
async fn slow_upstream_yields_gateway_timeout() {
    let r = rig(
        &["tok"],
        |m| m.latency = ghproxy_core::mock::LatencyProfile::flat(2000),
        |p| p.request_timeout = Duration::from_millis(500),
    )
    .await;
    let started = Instant::now();
    let resp = r.get("/repos/o/r").await;
    assert_eq!(resp.status(), 504);
    assert!(started.elapsed() < Duration::from_millis(1500));
    let v: serde_json::Value = serde_json::from_slice(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(v["proxy_error"], "timeout");
    let activity = r.proxy.pool().activity().recent();
    assert_eq!(activity.last().unwrap().class, ghproxy_core::StatusClass::Timeout);
}

#[tokio::test]
async fn unreachable_upstream_yields_bad_gateway() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let mock = ghproxy_core::mock::MockUpstream::spawn(common::mock_config(&["x"])).await.unwrap();
    let mut cfg = common::proxy_config(&mock, &["x"]);
    cfg.upstream_rest = dead.clone();
    cfg.upstream_graphql = format!("{dead}/graphql");
    let proxy = common::launch(&cfg).await;
    let resp = common::client().get(format!("{}/rate_limit", proxy.url())).send().await.unwrap();
    assert_eq!(resp.status(), 502);
    let v: serde_json::Value = serde_json::from_slice(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(v["proxy_error"], "upstream_unreachable");
}

#[tokio::test]
async fn abuse_response_is_retried_after_cooldown() {
    let r = rig(&["tok"], |_| {}, |_| {}).await;
    r.mock.flag_abuse("tok", 1);
    let started = Instant::now();
    let resp = r.get("/repos/o/r/issues").await;
    assert_eq!(resp.status(), 200);
    // retry-after was 1 s
    assert!(started.elapsed() >= Duration::from_secs(1));
    let calls = r.mock.calls("tok");
    assert_eq!(calls.len(), 2);
    assert_eq!(calls[0].status, 403);
    assert_eq!(calls[1].status, 200);
    assert_eq!(r.mock.report().violations, 0);
}

#[tokio::test]
async fn revoked_pool_yields_proxy_error() {
    let r = rig(&["a", "b"], |_| {}, |_| {}).await;
    r.mock.revoke("a");
    r.mock.revoke("b");
    let resp = r.get("/repos/o/r").await;
    assert_eq!(resp.status(), 500);
    let v: serde_json::Value = serde_json::from_slice(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(v["proxy_error"], "pool_exhausted");
    let snaps = r.proxy.pool().snapshots();
    assert!(snaps.iter().all(|s| s.status == WorkerStatus::Invalid));
}

#[tokio::test]
async fn relayed_headers_aggregate_the_pool() {
    let r = rig(&["a", "b"], |m| m.limit = 100, |p| p.token_limit = 100).await;
    let resp = r.get("/repos/o/r").await;
    assert_eq!(resp.status(), 200);
    let h = resp.headers();
    assert_eq!(h["x-ratelimit-limit"], "200");
    assert_eq!(h["x-ratelimit-remaining"], "199");
    assert!(h[HEADER_PROXY_WORKER].to_str().unwrap().starts_with('w'));
}

#[tokio::test]
async fn graphql_post_round_trips_body() {
    let r = rig(&["g"], |_| {}, |_| {}).await;
    let query = br#"{"query":"{ viewer { login } }"}"#.to_vec();
    let resp = r.client.post(r.url("/graphql")).body(query.clone()).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.bytes().await.unwrap(), synthetic_body("/graphql", &query));
    let calls = r.mock.calls("g");
    assert_eq!(calls[0].service, ghproxy_core::ServiceKind::Graphql);
}

#[tokio::test]
async fn unknown_client_token_passes_through() {
    let r = rig(&["pool"], |_| {}, |_| {}).await;
    let resp = r.client.get(r.url("/user")).header("authorization", "token stranger").send().await.unwrap();
    assert_eq!(resp.status(), 401);
    assert!(resp.headers().get(HEADER_PROXY_WORKER).is_none());
    assert_eq!(r.mock.report().unknown_token_calls, 1);
    assert_eq!(r.proxy.pool().stats().passthrough, 1);
    assert_eq!(r.mock.report().token("pool").calls, 0);
}

#[tokio::test]
async fn pool_token_from_client_pins_to_its_worker() {
    let r = rig(&["first", "second"], |_| {}, |_| {}).await;
    for _ in 0..4 {
        let resp = r.client.get(r.url("/user")).header("authorization", "token second").send().await.unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.headers()[HEADER_PROXY_WORKER], WorkerId(1).to_string());
    }
    assert_eq!(r.mock.report().token("second").accepted, 4);
    assert_eq!(r.mock.report().token("first").calls, 0);
}

#[tokio::test]
async fn queue_cap_rejects_overflow() {
    let r = rig(
        &["tok"],
        |m| m.latency = ghproxy_core::mock::LatencyProfile::flat(300),
        |p| p.queue_cap = Some(2),
    )
    .await;
    let out = fan_out(&r, 6, |i| format!("/repos/o/r?i={i}")).await;
    let full = out.iter().filter(|(s, body, _)| *s == 503 && body.contains("queue_full")).count();
    let ok = out.iter().filter(|(s, _, _)| *s == 200).count();
    assert!(full >= 1, "{out:?}");
    assert_eq!(full + ok, 6);
}

#[tokio::test]
async fn mock_abuse_body_is_verbatim() {
    let mock = ghproxy_core::mock::MockUpstream::spawn(common::mock_config(&["tok"])).await.unwrap();
    mock.flag_abuse("tok", 1);
    let resp = common::client()
        .get(format!("{}/repos/o/r", mock.base_url()))
        .header("authorization", "token tok")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 403);
    assert_eq!(resp.headers()["retry-after"], "1");
    let v: serde_json::Value = serde_json::from_slice(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(v["message"], ABUSE_MESSAGE);
}

#[tokio::test]
async fn timed_out_call_does_not_leave_token_busy() {
    let r = rig(
        &["tok"],
        |m| {
            m.latency = ghproxy_core::mock::LatencyProfile::flat(5);
            m.latency.classes.push(ghproxy_core::mock::LatencyClass { pattern: "/slow".into(), base_ms: 1500 });
        },
        |p| p.request_timeout = Duration::from_millis(400),
    )
    .await;
    assert_eq!(r.get("/slow").await.status(), 504);
    let resp = r.get("/repos/o/r").await;
    assert_eq!(resp.status(), 200);
    assert_eq!(r.mock.report().violations, 0);
}

#[tokio::test]
async fn mock_control_endpoints() {
    let r = rig(&["ctl"], |_| {}, |_| {}).await;
    assert_eq!(r.get("/repos/o/r").await.status(), 200);
    let base = r.mock.base_url();
    let ledger: serde_json::Value =
        serde_json::from_slice(&r.client.get(format!("{base}/__mock/ledger")).send().await.unwrap().bytes().await.unwrap()).unwrap();
    assert_eq!(ledger["total_calls"], 1);
    assert_eq!(ledger["per_token"]["ctl"]["accepted"], 1);
    let reset = r.client.post(format!("{base}/__mock/reset")).send().await.unwrap();
    assert_eq!(reset.status(), 204);
    assert_eq!(r.mock.report().total_calls, 0);
}
