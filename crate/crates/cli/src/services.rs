//! Long-running services. Each one binds, serves until `shutdown`
//! resolves, then drains in-flight work before returning.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use wattline_collector::{server, Exporter};
use wattline_core::{Clock, SystemClock};
use wattline_gate::{Gate, GateError};
use wattline_registry::{api, BackupSchedule, Registry, RegistryError};

use crate::config::StackConfig;
use crate::CliError;

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub listen: Option<String>,
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutdown requested");
}

async fn bind(addr: &str) -> Result<TcpListener, CliError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| CliError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    if let Ok(a) = listener.local_addr() {
        tracing::info!(addr = %a, "listening");
    }
    Ok(listener)
}

fn spawn_server(
    listener: TcpListener,
    router: axum::Router,
    mut stop: watch::Receiver<bool>,
) -> JoinHandle<std::io::Result<()>> {
    tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async move {
                let _ = stop.wait_for(|v| *v).await;
            })
            .await
    })
}

/// Waits for `shutdown` or the first server to stop, then stops and
/// drains everything else.
async fn supervise(
    shutdown: impl Future<Output = ()>,
    tx: watch::Sender<bool>,
    servers: Vec<JoinHandle<std::io::Result<()>>>,
    workers: Vec<JoinHandle<()>>,
) -> Result<(), CliError> {
    let mut first = futures::future::select_all(servers);
    let (early, rest) = tokio::select! {
        _ = shutdown => (None, first.into_inner()),
        (r, _, rest) = &mut first => (Some(r), rest),
    };
    let _ = tx.send(true);
    let mut failure = early.map(|r| match r {
        Ok(Ok(())) => "server stopped unexpectedly".to_string(),
        Ok(Err(e)) => e.to_string(),
        Err(e) => e.to_string(),
    });
    for s in rest {
        if let Ok(Err(e)) = s.await {
            failure.get_or_insert(e.to_string());
        }
    }
    for w in workers {
        let _ = w.await;
    }
    match failure {
        Some(m) => Err(CliError::Runtime(m)),
        None => Ok(()),
    }
}

pub async fn run_exporter(
    cfg: &StackConfig,
    overrides: &Overrides,
    shutdown: impl Future<Output = ()>,
) -> Result<(), CliError> {
    let mut e = cfg.exporter()?.clone();
    if let Some(l) = &overrides.listen {
        e.listen_address = l.clone();
    }
    e.validate().map_err(CliError::Config)?;
    let exporter = Arc::new(Exporter::from_config(&e));
    let listener = bind(&e.listen_address).await?;
    let (tx, rx) = watch::channel(false);
    let srv = spawn_server(listener, server::router(exporter, cfg.users.clone()), rx);
    supervise(shutdown, tx, vec![srv], Vec::new()).await
}

pub async fn run_registry(
    cfg: &StackConfig,
    overrides: &Overrides,
    shutdown: impl Future<Output = ()>,
) -> Result<(), CliError> {
    let mut r = cfg.registry()?.clone();
    if let Some(l) = &overrides.listen {
        r.listen = l.clone();
    }
    r.validate().map_err(CliError::Config)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let registry = Arc::new(Registry::from_config(&r, clock.clone()).map_err(|e| match e {
        RegistryError::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    })?);
    let listener = bind(&r.listen).await?;
    let (tx, rx) = watch::channel(false);
    let router = api::router(registry.store().clone(), &r.cluster_id, clock, r.users.clone());
    let srv = spawn_server(listener, router, rx.clone());
    let backup = r
        .backup
        .as_ref()
        .map(|b| BackupSchedule::new(&b.dir, b.interval_seconds as i64 * 1000));
    let cycles = tokio::spawn(registry.clone().run(
        Duration::from_secs(r.aggregation_interval_seconds),
        backup,
        rx.clone(),
    ));
    let ingest = tokio::spawn(ingest_loop(
        registry,
        Duration::from_secs(r.ingest_interval_seconds),
        rx,
    ));
    supervise(shutdown, tx, vec![srv], vec![cycles, ingest]).await
}

async fn ingest_loop(registry: Arc<Registry>, interval: Duration, mut stop: watch::Receiver<bool>) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            _ = stop.changed() => return,
        }
        match registry.ingest().await {
            Ok(r) => tracing::debug!(upserted = r.upserted, malformed = r.errors.len(), "ingest done"),
            Err(e) => tracing::warn!(error = %e, "ingest failed"),
        }
    }
}

pub async fn run_gate(
    cfg: &StackConfig,
    overrides: &Overrides,
    shutdown: impl Future<Output = ()>,
) -> Result<(), CliError> {
    let mut g = cfg.gate()?.clone();
    if let Some(l) = &overrides.listen {
        g.listen = l.clone();
    }
    let gate = Arc::new(Gate::from_config(&g).map_err(|e| match e {
        GateError::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    })?);
    let listener = bind(&g.listen).await?;
    let admin = match &g.admin_listen {
        Some(a) => Some(bind(a).await?),
        None => None,
    };
    let (tx, rx) = watch::channel(false);
    let mut servers = vec![spawn_server(listener, gate.clone().router(), rx.clone())];
    if let Some(a) = admin {
        servers.push(spawn_server(a, gate.clone().admin_router(), rx.clone()));
    }
    let health = tokio::spawn(gate.run_health(Duration::from_secs(g.health_interval_seconds), rx));
    supervise(shutdown, tx, servers, vec![health]).await
}
