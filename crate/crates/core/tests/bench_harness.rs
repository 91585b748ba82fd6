mod common;

use std::time::Duration;

use ghproxy_core::bench::{build_tasks, compare, run_direct, run_proxied, timeline_csv, CollectionTask};
use ghproxy_core::mock::{LatencyProfile, MockUpstream};

async fn flat_mock(tokens: &[&str], ms: u64) -> MockUpstream {
    let mut cfg = common::mock_config(tokens);
    cfg.latency = LatencyProfile::flat(ms);
    MockUpstream::spawn(cfg).await.unwrap()
}

#[tokio::test]
async fn direct_mode_matches_closed_form() {
    let mock = flat_mock(&["solo"], 30).await;
    let tasks = vec![CollectionTask::new("o/r", 3)];
    let tokens = vec!["solo".to_string()];
    let report = run_direct(&tasks, &tokens, &mock.base_url(), Duration::from_millis(50), Duration::from_millis(30)).await;
    let n = report.records.len() as f64;
    assert_eq!(report.records.len(), 12);
    let expected = n * (0.030 + 0.030 + 0.050);
    let wall = report.wall.as_secs_f64();
    assert!((wall - expected).abs() <= expected * 0.10, "wall {wall:.3}s vs expected {expected:.3}s");
    assert_eq!(mock.report().violations, 0);
    let first = report.records.iter().map(|r| r.start).min().unwrap();
    let last = report.records.iter().map(|r| r.end).max().unwrap();
    assert!(report.wall >= last - first);
}

#[tokio::test]
async fn direct_streams_run_in_parallel_per_token() {
    let tokens: Vec<String> = ["d0", "d1", "d2"].iter().map(|s| s.to_string()).collect();
    let mock = flat_mock(&["d0", "d1", "d2"], 20).await;
    let tasks = build_tasks(3, 2);
    let report = run_direct(&tasks, &tokens, &mock.base_url(), Duration::from_millis(50), Duration::from_millis(10)).await;
    // each token owns one repo: 8 requests of ~80 ms
    let per_stream = 8.0 * (0.020 + 0.010 + 0.050);
    let wall = report.wall.as_secs_f64();
    assert!((wall - per_stream).abs() <= per_stream * 0.15, "wall {wall:.3}s vs {per_stream:.3}s");
    for t in ["d0", "d1", "d2"] {
        assert_eq!(mock.report().token(t).accepted, 8);
    }
}

#[tokio::test]
async fn proxied_mode_issues_same_workload_without_violations() {
    let tokens = ["p0", "p1"];
    let mock = flat_mock(&tokens, 15).await;
    let mut cfg = common::proxy_config(&mock, &tokens);
    cfg.request_interval = Duration::from_millis(20);
    let proxy = common::launch(&cfg).await;
    let tasks = build_tasks(4, 2);
    let proxied = run_proxied(&tasks, 2, &proxy.url(), 3, 6, Duration::from_millis(10)).await;
    assert_eq!(proxied.records.len(), 32);
    assert_eq!(mock.report().violations, 0);

    let direct_mock = flat_mock(&tokens, 15).await;
    let names: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
    let direct = run_direct(&tasks, &names, &direct_mock.base_url(), Duration::from_millis(50), Duration::from_millis(10)).await;
    assert_eq!(direct.workload(), proxied.workload());

    // queueing makes proxied client-side durations longer than the service time
    let mean = |r: &ghproxy_core::bench::RunReport| {
        r.records.iter().map(|x| x.latency().as_secs_f64()).sum::<f64>() / r.records.len() as f64
    };
    assert!(mean(&proxied) > mean(&direct));

    let cmp = compare(&direct, &proxied);
    assert_eq!(cmp.endpoints.len(), 8);
    let csv = timeline_csv(&[&direct, &proxied]);
    assert_eq!(csv.lines().count(), 1 + 64);
}
