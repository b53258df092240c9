//! Mock real-time emission-factor endpoint replaying the trace's hourly
//! factors against a clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use wattline_core::Clock;

use crate::trace::Trace;

#[derive(Debug)]
pub struct FactorServer {
    region: String,
    start_ms: i64,
    hourly: Vec<f64>,
    clock: Arc<dyn Clock>,
    hits: AtomicU64,
}

#[derive(Deserialize)]
struct LatestParams {
    region: Option<String>,
}

impl FactorServer {
    pub fn new(region: &str, start_ms: i64, hourly: Vec<f64>, clock: Arc<dyn Clock>) -> Self {
        Self {
            region: region.to_string(),
            start_ms,
            hourly,
            clock,
            hits: AtomicU64::new(0),
        }
    }

    pub fn for_trace(trace: &Trace, clock: Arc<dyn Clock>) -> Self {
        Self::new(&trace.spec.region, trace.start_ms, trace.hourly_factors.clone(), clock)
    }

    /// The factor in force at `t_ms`.
    pub fn factor_at(&self, t_ms: i64) -> f64 {
        let hour = ((t_ms - self.start_ms).max(0) / 3_600_000) as usize;
        self.hourly[hour.min(self.hourly.len() - 1)]
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new().route("/latest", get(latest)).with_state(self)
    }
}

async fn latest(State(server): State<Arc<FactorServer>>, Query(p): Query<LatestParams>) -> Response {
    server.hits.fetch_add(1, Ordering::SeqCst);
    match p.region {
        Some(r) if r == server.region => Json(serde_json::json!({
            "region": r,
            "carbon_intensity": server.factor_at(server.clock.now_ms()),
        }))
        .into_response(),
        Some(r) => (StatusCode::NOT_FOUND, format!("unknown region {r}")).into_response(),
        None => (StatusCode::BAD_REQUEST, "missing region").into_response(),
    }
}
