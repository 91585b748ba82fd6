use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ghproxy_core::app::{LaunchOptions, ProxyServer};
use ghproxy_core::bench::{self, BenchOptions, RunReport};
use ghproxy_core::config::{config_from_args, ProxyArgs};
use ghproxy_core::mock::{MockConfig, MockUpstream};
use tracing::{error, info};

#[derive(Debug, Parser)]
#[command(name = "ghproxy", version, about = "Token-pool proxy for the GitHub REST and GraphQL APIs", args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(flatten)]
    proxy: ProxyArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the offline mock upstream
    Mock(MockArgs),
    /// Compare direct and proxied collection against the mock upstream
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct MockArgs {
    /// TOML file with tokens, limits, window and latency profile
    #[arg(short, long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Listen port (overrides the file)
    #[arg(short, long)]
    port: Option<u16>,
    /// Accepted tokens, comma-separated (overrides the file)
    #[arg(short, long, value_delimiter = ',')]
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Direct,
    Proxied,
    Both,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "both")]
    mode: BenchMode,
    /// Number of tokens
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    /// Repositories to collect
    #[arg(long, default_value_t = 12)]
    repos: usize,
    /// Pages per resource kind
    #[arg(long, default_value_t = 5)]
    pages: u32,
    /// Simulated client processing per response, in milliseconds
    #[arg(long, default_value_t = 30)]
    processing_ms: u64,
    /// Pause after every direct-mode request, in milliseconds
    #[arg(long, default_value_t = 50)]
    interval_ms: u64,
    /// Proxy request interval during the proxied run, in milliseconds
    #[arg(long, default_value_t = 50)]
    proxy_interval_ms: u64,
    /// Write the request timeline here as CSV
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match cli.command {
        None => serve(cli.proxy).await,
        Some(Command::Mock(args)) => mock(args).await,
        Some(Command::Bench(args)) => run_bench(args).await,
    }
}

async fn serve(args: ProxyArgs) -> ExitCode {
    let env: HashMap<String, String> = std::env::vars().collect();
    let config = match config_from_args(&args, &env) {
        Ok((config, _warnings)) => config,
        Err(e) => {
            eprintln!("ghproxy: {e}");
            return ExitCode::from(2);
        }
    };
    let options = LaunchOptions { log_to_stderr: !config.monitor, ..LaunchOptions::default() };
    let server = match ProxyServer::launch(&config, options).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ghproxy: {e}");
            return ExitCode::from(2);
        }
    };
    tokio::select! {
        _ = server.serve_forever() => ExitCode::FAILURE,
        _ = tokio::signal::ctrl_c() => {
            info!("shutting down");
            ExitCode::SUCCESS
        }
    }
}

async fn mock(args: MockArgs) -> ExitCode {
    let mut config = match &args.config {
        Some(path) => match MockConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("ghproxy mock: {e}");
                return ExitCode::from(2);
            }
        },
        None => MockConfig::default(),
    };
    if let Some(port) = args.port {
        config.port = port;
    }
    if !args.tokens.is_empty() {
        config.tokens = args.tokens;
    }
    let mock = match MockUpstream::spawn(config).await {
        Ok(m) => m,
        Err(e) => {
            eprintln!("ghproxy mock: {e}");
            return ExitCode::from(2);
        }
    };
    println!("mock upstream listening on {}", mock.base_url());
    let _ = tokio::signal::ctrl_c().await;
    ExitCode::SUCCESS
}

fn print_run(report: &RunReport) {
    println!(
        "{:<8} wall {:>8.2} s  requests {:>5}  retries {}  violations {}",
        report.mode.as_str(),
        report.wall.as_secs_f64(),
        report.records.len(),
        report.retries,
        report.violations
    );
}

async fn run_bench(args: BenchArgs) -> ExitCode {
    if args.tokens == 0 || args.repos == 0 || args.pages == 0 {
        eprintln!("ghproxy bench: --tokens, --repos and --pages must be at least 1");
        return ExitCode::from(2);
    }
    let options = BenchOptions {
        tokens: args.tokens,
        repos: args.repos,
        pages: args.pages,
        processing: Duration::from_millis(args.processing_ms),
        direct_interval: Duration::from_millis(args.interval_ms),
        proxy_interval: Duration::from_millis(args.proxy_interval_ms),
        ..BenchOptions::default()
    };
    let mut runs = Vec::new();
    if args.mode != BenchMode::Proxied {
        match bench::bench_direct(&options).await {
            Ok(r) => runs.push(r),
            Err(e) => {
                error!("direct run failed: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    if args.mode != BenchMode::Direct {
        match bench::bench_proxied(&options).await {
            Ok(r) => runs.push(r),
            Err(e) => {
                error!("proxied run failed: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    for r in &runs {
        print_run(r);
    }
    if let Some(path) = &args.out {
        let refs: Vec<&RunReport> = runs.iter().collect();
        if let Err(e) = std::fs::write(path, bench::timeline_csv(&refs)) {
            eprintln!("ghproxy bench: {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
        println!("timeline written to {}", path.display());
    }
    let violations: u64 = runs.iter().map(|r| r.violations).sum();
    let mut failed = violations > 0;
    if let [direct, proxied] = runs.as_slice() {
        let cmp = bench::compare(direct, proxied);
        println!();
        print!("{}", cmp.table());
        if cmp.regression {
            eprintln!("ghproxy bench: proxied run was slower than direct with {} tokens", cmp.tokens);
            failed = true;
        }
    }
    if violations > 0 {
        eprintln!("ghproxy bench: upstream recorded {violations} concurrency violations");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
