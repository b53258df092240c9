//! The reverse proxy: inspect, authorize, select, forward, relay.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use wattline_core::auth::{check_basic, BasicCredential};
use wattline_registry::Store;

use crate::authorize::{authorize, Decision, DenyReason, Ownership, RegistryHttp, StoreOwnership};
use crate::config::GateConfig;
use crate::inspect::extract_workload_ids;
use crate::pool::BackendPool;
use crate::GateError;

pub const USER_HEADER: &str = "x-grafana-user";

/// Request outcomes since start.
#[derive(Debug, Default)]
pub struct GateStats {
    pub allowed: AtomicU64,
    pub denied: AtomicU64,
    pub forwarded: AtomicU64,
}

pub struct Gate {
    cluster_id: String,
    id_label: String,
    allowlist: BTreeSet<String>,
    pool: Arc<BackendPool>,
    ownership: Arc<dyn Ownership>,
    client: reqwest::Client,
    users: Arc<Vec<BasicCredential>>,
    stats: GateStats,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    status: &'static str,
    #[serde(rename = "errorType")]
    error_type: &'a str,
    error: String,
}

fn error(status: StatusCode, error_type: &str, message: String) -> Response {
    (
        status,
        Json(ErrorBody {
            status: "error",
            error_type,
            error: message,
        }),
    )
        .into_response()
}

impl Gate {
    pub fn new(
        cluster_id: &str,
        id_label: &str,
        pool: Arc<BackendPool>,
        ownership: Arc<dyn Ownership>,
        timeout: Duration,
    ) -> Result<Self, GateError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GateError::Config(e.to_string()))?;
        Ok(Self {
            cluster_id: cluster_id.to_string(),
            id_label: id_label.to_string(),
            allowlist: BTreeSet::new(),
            pool,
            ownership,
            client,
            users: Arc::new(Vec::new()),
            stats: GateStats::default(),
        })
    }

    pub fn with_allowlist(mut self, names: impl IntoIterator<Item = String>) -> Self {
        self.allowlist = names.into_iter().collect();
        self
    }

    pub fn with_users(mut self, users: Vec<BasicCredential>) -> Self {
        self.users = Arc::new(users);
        self
    }

    pub fn from_config(cfg: &GateConfig) -> Result<Self, GateError> {
        cfg.validate().map_err(GateError::Config)?;
        let timeout = Duration::from_secs(cfg.timeout_seconds);
        let pool = Arc::new(BackendPool::new(&cfg.backends, cfg.strategy)?);
        let ownership: Arc<dyn Ownership> = match (&cfg.registry.url, &cfg.registry.database) {
            (Some(url), _) => {
                let auth = cfg.registry.username.clone().zip(cfg.registry.password.clone());
                Arc::new(RegistryHttp::new(url, timeout, auth)?)
            }
            (None, Some(path)) => {
                let store = Store::open(path).map_err(|e| GateError::Registry(e.to_string()))?;
                Arc::new(StoreOwnership(Arc::new(store)))
            }
            (None, None) => return Err(GateError::Config("gate.registry needs `url` or `database`".into())),
        };
        Ok(Self::new(&cfg.cluster_id, &cfg.id_label, pool, ownership, timeout)?
            .with_allowlist(cfg.allowlist.iter().cloned())
            .with_users(cfg.users.clone()))
    }

    pub fn pool(&self) -> &Arc<BackendPool> {
        &self.pool
    }

    pub fn stats(&self) -> &GateStats {
        &self.stats
    }

    /// User-facing routes: the two query paths and `/health`.
    pub fn router(self: Arc<Self>) -> Router {
        let api = Router::new()
            .route("/api/v1/query", get(proxy).post(proxy))
            .route("/api/v1/query_range", get(proxy).post(proxy))
            .route_layer(middleware::from_fn_with_state(self.clone(), basic_auth));
        api.route("/health", get(|| async { "ok" })).with_state(self)
    }

    /// Routes for the private listener: series deletion on every backend.
    pub fn admin_router(self: Arc<Self>) -> Router {
        Router::new()
            .route(
                "/api/v1/admin/tsdb/delete_series",
                post(delete_series).put(delete_series),
            )
            .route("/health", get(|| async { "ok" }))
            .with_state(self)
    }

    /// Probes every backend's `/-/healthy` once.
    pub async fn check_health(&self) {
        for (i, b) in self.pool.backends().iter().enumerate() {
            let ok = matches!(
                self.client.get(format!("{}/-/healthy", b.url)).send().await,
                Ok(r) if r.status().is_success()
            );
            if ok != b.healthy() {
                tracing::info!(backend = %b.url, healthy = ok, "backend health changed");
            }
            self.pool.set_healthy(i, ok);
        }
    }

    pub async fn run_health(self: Arc<Self>, interval: Duration, mut shutdown: tokio::sync::watch::Receiver<bool>) {
        let mut ticker = tokio::time::interval(interval);
        loop {
            tokio::select! {
                _ = ticker.tick() => self.check_health().await,
                _ = shutdown.changed() => return,
            }
        }
    }
}

async fn basic_auth(State(gate): State<Arc<Gate>>, req: Request, next: Next) -> Response {
    let h = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if check_basic(&gate.users, h) {
        next.run(req).await
    } else {
        (
            StatusCode::UNAUTHORIZED,
            [(header::WWW_AUTHENTICATE, "Basic realm=\"wattline\"")],
        )
            .into_response()
    }
}

fn is_form(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/x-www-form-urlencoded"))
}

/// The `query` parameter from the URL or a form body.
fn query_param(uri: &Uri, headers: &HeaderMap, body: &[u8]) -> Option<String> {
    let from_url = url::form_urlencoded::parse(uri.query().unwrap_or("").as_bytes())
        .find(|(k, _)| k == "query")
        .map(|(_, v)| v.into_owned());
    let from_body = if is_form(headers) {
        url::form_urlencoded::parse(body)
            .find(|(k, _)| k == "query")
            .map(|(_, v)| v.into_owned())
    } else {
        None
    };
    from_body.or(from_url)
}

async fn proxy(State(gate): State<Arc<Gate>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let Some(query) = query_param(&uri, &headers, &body) else {
        return error(StatusCode::BAD_REQUEST, "bad_data", "missing `query`".into());
    };
    let inspection = match extract_workload_ids(&query, &gate.id_label) {
        Ok(i) => i,
        Err(e) => {
            gate.stats.denied.fetch_add(1, Ordering::Relaxed);
            return error(StatusCode::BAD_REQUEST, "bad_data", e.to_string());
        }
    };
    let user = headers.get(USER_HEADER).and_then(|v| v.to_str().ok());
    let decision = authorize(
        user,
        &gate.cluster_id,
        &inspection,
        &gate.allowlist,
        gate.ownership.as_ref(),
    )
    .await;
    if let Decision::Deny(reason) = decision {
        gate.stats.denied.fetch_add(1, Ordering::Relaxed);
        tracing::info!(user = user.unwrap_or(""), %reason, "query denied");
        let status = match reason {
            DenyReason::RegistryUnavailable(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::FORBIDDEN,
        };
        return error(status, reason.code(), reason.to_string());
    }
    gate.stats.allowed.fetch_add(1, Ordering::Relaxed);
    let lease = match gate.pool.select() {
        Ok(l) => l,
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", e.to_string()),
    };
    let target = match uri.query() {
        Some(q) => format!("{}{}?{q}", lease.url(), uri.path()),
        None => format!("{}{}", lease.url(), uri.path()),
    };
    let mut req = gate.client.request(method, target).body(body);
    for name in [header::CONTENT_TYPE, header::ACCEPT] {
        if let Some(v) = headers.get(&name) {
            req = req.header(name, v);
        }
    }
    gate.stats.forwarded.fetch_add(1, Ordering::Relaxed);
    let result = match req.send().await {
        Ok(resp) => {
            let status = resp.status();
            let content_type = resp.headers().get(header::CONTENT_TYPE).cloned();
            resp.bytes().await.map(|b| (status, content_type, b))
        }
        Err(e) => Err(e),
    };
    drop(lease);
    match result {
        Ok((status, content_type, bytes)) => {
            let mut out = (status, bytes).into_response();
            if let Some(ct) = content_type {
                out.headers_mut().insert(header::CONTENT_TYPE, ct);
            }
            out
        }
        Err(e) if e.is_timeout() => error(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("backend timed out: {e}"),
        ),
        Err(e) => error(StatusCode::BAD_GATEWAY, "unavailable", format!("backend failed: {e}")),
    }
}

async fn delete_series(
    State(gate): State<Arc<Gate>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let mut failures = Vec::new();
    for b in gate.pool.backends() {
        let target = match uri.query() {
            Some(q) => format!("{}{}?{q}", b.url, uri.path()),
            None => format!("{}{}", b.url, uri.path()),
        };
        let mut req = gate.client.request(method.clone(), target).body(body.clone());
        if let Some(v) = headers.get(header::CONTENT_TYPE) {
            req = req.header(header::CONTENT_TYPE, v);
        }
        match req.send().await {
            Ok(r) if r.status().is_success() => {}
            Ok(r) => failures.push(format!("{}: {}", b.url, r.status())),
            Err(e) => failures.push(format!("{}: {e}", b.url)),
        }
    }
    if failures.is_empty() {
        StatusCode::NO_CONTENT.into_response()
    } else {
        error(StatusCode::BAD_GATEWAY, "unavailable", failures.join("; "))
    }
}
