//! One exporter per simulated node, each on its own loopback listener.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::Request;
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};

use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use wattline_collector::exporter::{CollectorSet, Exporter};
use wattline_collector::server;
use wattline_core::auth::BasicCredential;
use wattline_core::Clock;

use crate::scrape::Target;
use crate::simfs::SimFs;
use crate::trace::Trace;

pub struct SimCluster {
    targets: Vec<Target>,
    addrs: Vec<SocketAddr>,
    up: Vec<Arc<AtomicBool>>,
    tasks: Vec<Option<JoinHandle<()>>>,
}

async fn gate(up: Arc<AtomicBool>, req: Request, next: Next) -> Response {
    if up.load(Ordering::SeqCst) {
        next.run(req).await
    } else {
        StatusCode::SERVICE_UNAVAILABLE.into_response()
    }
}

impl SimCluster {
    /// Starts an exporter for every node of `trace`, showing the instant
    /// that `clock` points at.
    pub async fn start(trace: Arc<Trace>, clock: Arc<dyn Clock>, users: Vec<BasicCredential>) -> std::io::Result<Self> {
        let mut targets = Vec::new();
        let mut addrs = Vec::new();
        let mut tasks = Vec::new();
        let mut ups = Vec::new();
        for (n, node) in trace.nodes.iter().enumerate() {
            let fs = Arc::new(SimFs::new(trace.clone(), n, clock.clone()));
            let exporter = Arc::new(Exporter::new(fs, CollectorSet::default(), clock.clone()));
            let listener = TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            let up = Arc::new(AtomicBool::new(true));
            let flag = up.clone();
            let router = server::router(exporter, users.clone())
                .layer(middleware::from_fn(move |req, next| gate(flag.clone(), req, next)));
            ups.push(up);
            tasks.push(Some(tokio::spawn(async move {
                if let Err(e) = axum::serve(listener, router).await {
                    tracing::error!(error = %e, "simulated exporter stopped");
                }
            })));
            targets.push(Target {
                instance: node.instance.clone(),
                url: format!("http://{addr}/metrics"),
            });
            addrs.push(addr);
        }
        Ok(Self {
            targets,
            addrs,
            up: ups,
            tasks,
        })
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn addr(&self, node: usize) -> SocketAddr {
        self.addrs[node]
    }

    /// Takes one exporter down: every request is answered with 503 until
    /// [`SimCluster::resume`].
    pub fn stop(&self, node: usize) {
        self.up[node].store(false, Ordering::SeqCst);
    }

    pub fn resume(&self, node: usize) {
        self.up[node].store(true, Ordering::SeqCst);
    }

    /// Targets in the `instance url` file format.
    pub fn targets_file(&self) -> String {
        self.targets
            .iter()
            .map(|t| format!("{} {}\n", t.instance, t.url))
            .collect()
    }
}

impl Drop for SimCluster {
    fn drop(&mut self) {
        for task in self.tasks.iter_mut().filter_map(Option::take) {
            task.abort();
        }
    }
}
