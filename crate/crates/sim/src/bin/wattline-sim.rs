use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use wattline_core::SystemClock;
use wattline_sim::scrape::parse_targets;
use wattline_sim::{manifest, tsdb, ClusterSpec, MockTsdb, ScrapeDriver, ScrapeOptions, Sink};

#[derive(Parser)]
#[command(
    name = "wattline-sim",
    version,
    about = "Synthetic cluster, mock TSDB and scrape driver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace: manifest, accounting export and fixture trees.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write fixture trees every N scrape instants.
        #[arg(long, default_value_t = 240)]
        fixture_stride: usize,
    },
    /// Serve a mock TSDB, optionally preloaded from a manifest.
    Tsdb {
        #[arg(long)]
        load: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:9090")]
        listen: String,
    },
    /// Scrape targets into a mock TSDB.
    Scrape {
        #[arg(long)]
        targets: PathBuf,
        /// Seconds between cycles.
        #[arg(long, default_value_t = 15)]
        interval: u64,
        /// Stop after this many cycles.
        #[arg(long)]
        cycles: Option<usize>,
        /// Push to a running mock TSDB instead of serving an embedded one.
        #[arg(long)]
        push: Option<String>,
        /// Listen address of the embedded mock TSDB.
        #[arg(long, default_value = "127.0.0.1:9090")]
        listen: String,
    },
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn serve_tsdb(db: Arc<MockTsdb>, listen: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "mock tsdb listening");
    axum::serve(listener, tsdb::router(db))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    Ok(())
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            spec,
            out,
            fixture_stride,
        } => {
            let spec = ClusterSpec::load(&spec)?;
            let trace = wattline_sim::generate_cluster(&spec, &out, fixture_stride)?;
            let violations = wattline_sim::validate_trace(&trace);
            for v in violations.iter().take(10) {
                tracing::warn!(instance = %v.instance, instant = v.instant, "{}", v.what);
            }
            println!(
                "{} nodes, {} jobs ({} short), {} instants -> {}",
                trace.nodes.len(),
                trace.jobs.len(),
                trace.short_job_count(),
                trace.last_instant + 1,
                out.display()
            );
            anyhow::ensure!(violations.is_empty(), "{} consistency violations", violations.len());
        }
        Command::Tsdb { load, listen } => {
            let db = Arc::new(MockTsdb::new());
            if let Some(path) = load {
                let records = manifest::read_manifest(&path)?;
                let n = db.load_manifest(&records);
                tracing::info!(points = n, series = db.series_count(), "manifest loaded");
            }
            serve_tsdb(db, &listen).await?;
        }
        Command::Scrape {
            targets,
            interval,
            cycles,
            push,
            listen,
        } => {
            let text = std::fs::read_to_string(&targets)?;
            let targets = parse_targets(&text)?;
            let (tx, rx) = tokio::sync::watch::channel(false);
            let sink = match push {
                Some(base) => Sink::Remote {
                    client: reqwest::Client::new(),
                    base,
                },
                None => {
                    let db = Arc::new(MockTsdb::new());
                    let listener = tokio::net::TcpListener::bind(&listen).await?;
                    tracing::info!(addr = %listener.local_addr()?, "mock tsdb listening");
                    let mut stop = rx.clone();
                    let router = tsdb::router(db.clone());
                    tokio::spawn(async move {
                        let _ = axum::serve(listener, router)
                            .with_graceful_shutdown(async move {
                                let _ = stop.changed().await;
                            })
                            .await;
                    });
                    Sink::Local(db)
                }
            };
            tokio::spawn(async move {
                shutdown_signal().await;
                let _ = tx.send(true);
            });
            let driver = ScrapeDriver::new(targets, sink, ScrapeOptions::default());
            let reports = driver
                .run(&SystemClock, Duration::from_secs(interval.max(1)), cycles, rx)
                .await;
            for r in &reports {
                println!(
                    "t={} samples={} appended={} parse_errors={} down={:?} max_latency={:?}",
                    r.timestamp_ms,
                    r.samples(),
                    r.appended(),
                    r.parse_errors(),
                    r.down(),
                    r.max_latency()
                );
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
