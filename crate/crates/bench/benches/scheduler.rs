use std::hint::black_box;
use std::time::{Duration, Instant, SystemTime};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ghproxy_core::observe::{render_monitor, ActivityLog, ActivityRecord, MonitorSummary, StatusClass, WorkerView};
use ghproxy_core::{select_worker, RateBudget, ServiceKind, WorkerId, WorkerSnapshot, WorkerStatus};

fn pool(n: usize) -> Vec<WorkerSnapshot> {
    (0..n)
        .map(|i| WorkerSnapshot {
            id: WorkerId(i),
            status: if i % 7 == 3 { WorkerStatus::Invalid } else { WorkerStatus::Active },
            queue_len: (i * 13) % 5,
            in_flight: i % 2 == 0,
            budgets: [RateBudget::new(5000, (i as u64 * 397) % 5000, 0); 2],
        })
        .collect()
}

fn bench_select(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_worker");
    for n in [3, 16, 128] {
        let snaps = pool(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &snaps, |b, snaps| {
            b.iter(|| select_worker(black_box(snaps), ServiceKind::Graphql, 10))
        });
    }
    group.finish();
}

fn bench_activity(c: &mut Criterion) {
    let log = ActivityLog::new(1000, None);
    let now = Instant::now();
    for i in 0..1000u64 {
        let status = [200u16, 304, 404, 502][(i % 4) as usize];
        log.record(ActivityRecord {
            at: now,
            timestamp: SystemTime::now(),
            worker: Some(WorkerId((i % 3) as usize)),
            service: ServiceKind::Rest,
            method: http::Method::GET,
            path: format!("/repos/o/r/issues?page={i}"),
            status: Some(status),
            class: StatusClass::of(http::StatusCode::from_u16(status).unwrap()),
            latency: Duration::from_millis(i % 90),
            queue_len: 0,
        });
    }
    c.bench_function("activity_summarize_1000", |b| b.iter(|| log.summarize(Duration::from_secs(60), black_box(now))));

    let wall = SystemTime::now();
    let workers: Vec<WorkerView> = pool(8)
        .iter()
        .map(|s| WorkerView::from_snapshot(s, "ghp_benchmarktoken", ServiceKind::Graphql, now, wall))
        .collect();
    let summary = MonitorSummary {
        service: ServiceKind::Graphql,
        window: Duration::from_secs(60),
        counts: log.summarize(Duration::from_secs(60), now),
        workers,
    };
    c.bench_function("render_monitor_8_workers", |b| b.iter(|| render_monitor(black_box(&summary))));
}

criterion_group!(benches, bench_select, bench_activity);
criterion_main!(benches);
