//! HTTP surface: `/metrics` and `/health`.

use std::future::Future;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use wattline_core::auth::{check_basic, BasicCredential};
use wattline_core::exposition::CONTENT_TYPE;

use crate::exporter::Exporter;

#[derive(Clone)]
struct AppState {
    exporter: Arc<Exporter>,
    users: Arc<Vec<BasicCredential>>,
}

/// Router for one exporter. An empty `users` list disables basic auth.
pub fn router(exporter: Arc<Exporter>, users: Vec<BasicCredential>) -> Router {
    Router::new()
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .with_state(AppState {
            exporter,
            users: Arc::new(users),
        })
}

async fn metrics(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if !check_basic(&state.users, auth) {
        return (
            StatusCode::UNAUTHORIZED,
            [(header::WWW_AUTHENTICATE, "Basic realm=\"wattline\"")],
        )
            .into_response();
    }
    let exporter = state.exporter.clone();
    match tokio::task::spawn_blocking(move || exporter.render()).await {
        Ok(body) => ([(header::CONTENT_TYPE, CONTENT_TYPE)], body).into_response(),
        Err(e) => {
            tracing::error!(error = %e, "scrape task failed");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

async fn health() -> &'static str {
    "ok"
}

/// Serves until `shutdown` resolves, then drains in-flight scrapes.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
