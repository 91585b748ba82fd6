use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Duration;

use super::{Mode, RequestRecord, RunReport};

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointSummary {
    pub mode: Mode,
    pub resource: String,
    pub count: usize,
    pub mean: Duration,
    pub p50: Duration,
    pub p95: Duration,
    pub max: Duration,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub tokens: usize,
    pub direct_wall: Duration,
    pub proxied_wall: Duration,
    /// Direct wall time over proxied wall time.
    pub speedup: f64,
    /// Proxied was not faster although several tokens were available.
    pub regression: bool,
    pub endpoints: Vec<EndpointSummary>,
}

fn percentile(sorted: &[Duration], q: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(mode: Mode, records: &[RequestRecord]) -> Vec<EndpointSummary> {
    let mut by: BTreeMap<String, Vec<Duration>> = BTreeMap::new();
    for r in records {
        by.entry(r.resource().to_string()).or_default().push(r.latency());
    }
    by.into_iter()
        .map(|(resource, mut lat)| {
            lat.sort();
            let total: Duration = lat.iter().sum();
            EndpointSummary {
                mode,
                resource,
                count: lat.len(),
                mean: total / lat.len() as u32,
                p50: percentile(&lat, 0.5),
                p95: percentile(&lat, 0.95),
                max: *lat.last().expect("non-empty group"),
            }
        })
        .collect()
}

pub fn compare(direct: &RunReport, proxied: &RunReport) -> Comparison {
    let speedup = direct.wall.as_secs_f64() / proxied.wall.as_secs_f64().max(1e-9);
    let tokens = direct.tokens.max(proxied.tokens);
    let mut endpoints = summarize(Mode::Direct, &direct.records);
    endpoints.extend(summarize(Mode::Proxied, &proxied.records));
    Comparison {
        tokens,
        direct_wall: direct.wall,
        proxied_wall: proxied.wall,
        speedup,
        regression: tokens >= 2 && proxied.wall >= direct.wall,
        endpoints,
    }
}

fn ms(d: Duration) -> String {
    format!("{:.1}", d.as_secs_f64() * 1000.0)
}

impl Comparison {
    /// Plain-text table for the terminal.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tokens           {}", self.tokens);
        let _ = writeln!(out, "direct wall      {:.2} s", self.direct_wall.as_secs_f64());
        let _ = writeln!(out, "proxied wall     {:.2} s", self.proxied_wall.as_secs_f64());
        let _ = writeln!(out, "speedup          {:.3}x", self.speedup);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8} {:<11} {:>6} {:>9} {:>9} {:>9} {:>9}", "mode", "resource", "count", "mean_ms", "p50_ms", "p95_ms", "max_ms");
        for e in &self.endpoints {
            let _ = writeln!(
                out,
                "{:<8} {:<11} {:>6} {:>9} {:>9} {:>9} {:>9}",
                e.mode.as_str(),
                e.resource,
                e.count,
                ms(e.mean),
                ms(e.p50),
                ms(e.p95),
                ms(e.max)
            );
        }
        out
    }
}

/// One row per request: `mode,stream,path,status,start_ms,end_ms`.
pub fn timeline_csv(reports: &[&RunReport]) -> String {
    let mut out = String::from("mode,stream,path,status,start_ms,end_ms\n");
    for report in reports {
        for r in &report.records {
            let _ = writeln!(out, "{},{},{},{},{},{}", report.mode.as_str(), r.stream, r.path, r.status, ms(r.start), ms(r.end));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, start: u64, end: u64) -> RequestRecord {
        RequestRecord {
            stream: 0,
            path: path.into(),
            start: Duration::from_millis(start),
            end: Duration::from_millis(end),
            status: 200,
        }
    }

    fn run(mode: Mode, tokens: usize, wall_ms: u64, records: Vec<RequestRecord>) -> RunReport {
        RunReport { mode, tokens, records, wall: Duration::from_millis(wall_ms), processing: Duration::ZERO, retries: 0, violations: 0 }
    }

    #[test]
    fn speedup_and_regression_flag() {
        let d = run(Mode::Direct, 3, 1200, vec![]);
        let p = run(Mode::Proxied, 3, 1000, vec![]);
        let c = compare(&d, &p);
        assert!((c.speedup - 1.2).abs() < 1e-9);
        assert!(!c.regression);
        assert!(compare(&p, &d).regression);
        let single = compare(&run(Mode::Direct, 1, 900, vec![]), &run(Mode::Proxied, 1, 1000, vec![]));
        assert!(!single.regression);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let recs: Vec<_> = (1..=20).map(|i| rec("/repos/o/r/tags", 0, i * 10)).collect();
        let s = summarize(Mode::Direct, &recs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].count, 20);
        assert_eq!(s[0].p50, Duration::from_millis(100));
        assert_eq!(s[0].p95, Duration::from_millis(190));
        assert_eq!(s[0].max, Duration::from_millis(200));
        assert_eq!(s[0].mean, Duration::from_millis(105));
    }

    #[test]
    fn csv_rows() {
        let d = run(Mode::Direct, 1, 10, vec![rec("/repos/o/r/issues?page=1", 0, 7)]);
        let csv = timeline_csv(&[&d]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "direct,0,/repos/o/r/issues?page=1,200,0.0,7.0");
    }
}
