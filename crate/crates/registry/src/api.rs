//! JSON API: unit listing, usage aggregates and ownership checks.

use std::sync::Arc;

use axum::extract::{Path, RawQuery, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use wattline_core::auth::{check_basic, BasicCredential};
use wattline_core::{Clock, Scope, WorkloadUnit};

use crate::aggregate::combine;
use crate::store::{Store, UnitFilter};

#[derive(Clone)]
struct ApiState {
    store: Arc<Store>,
    cluster_id: String,
    clock: Arc<dyn Clock>,
    users: Arc<Vec<BasicCredential>>,
}

#[derive(Serialize)]
struct UnitView {
    #[serde(flatten)]
    unit: WorkloadUnit,
    instance: Option<String>,
    purged: bool,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

/// Router for the registry API. An empty `users` list disables basic auth.
pub fn router(store: Arc<Store>, cluster_id: &str, clock: Arc<dyn Clock>, users: Vec<BasicCredential>) -> Router {
    let state = ApiState {
        store,
        cluster_id: cluster_id.to_string(),
        clock,
        users: Arc::new(users),
    };
    let api = Router::new()
        .route("/api/v1/units", get(units))
        .route("/api/v1/usage/{scope}", get(usage))
        .route("/api/v1/verify", get(verify))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    api.route("/health", get(|| async { "ok" })).with_state(state)
}

async fn auth(State(state): State<ApiState>, req: Request, next: Next) -> Response {
    let header = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if check_basic(&state.users, header) {
        next.run(req).await
    } else {
        (
            StatusCode::UNAUTHORIZED,
            [(header::WWW_AUTHENTICATE, "Basic realm=\"wattline\"")],
        )
            .into_response()
    }
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(ErrorBody { error: message })).into_response()
}

fn internal(e: crate::RegistryError) -> Response {
    tracing::error!(error = %e, "registry api failure");
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(ErrorBody { error: e.to_string() }),
    )
        .into_response()
}

fn params(query: Option<&str>) -> Vec<(String, String)> {
    url::form_urlencoded::parse(query.unwrap_or("").as_bytes())
        .into_owned()
        .collect()
}

fn param<'a>(params: &'a [(String, String)], name: &str) -> Option<&'a str> {
    params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

/// Milliseconds since the epoch or an RFC 3339 timestamp.
#[allow(clippy::result_large_err)]
fn time_param(params: &[(String, String)], name: &str) -> Result<Option<i64>, Response> {
    match param(params, name) {
        None | Some("") => Ok(None),
        Some(v) => v
            .parse::<i64>()
            .ok()
            .or_else(|| {
                chrono::DateTime::parse_from_rfc3339(v)
                    .ok()
                    .map(|t| t.timestamp_millis())
            })
            .map(Some)
            .ok_or_else(|| bad_request(format!("invalid `{name}`: {v}"))),
    }
}

async fn units(State(state): State<ApiState>, RawQuery(q): RawQuery) -> Response {
    let p = params(q.as_deref());
    let (start, end) = match (time_param(&p, "start"), time_param(&p, "end")) {
        (Ok(s), Ok(e)) => (s, e),
        (Err(r), _) | (_, Err(r)) => return r,
    };
    let filter = UnitFilter {
        user: param(&p, "user").map(str::to_string),
        project: param(&p, "project").map(str::to_string),
        start_ms: start,
        end_ms: end,
    };
    match state.store.units(&filter) {
        Ok(units) => Json(
            units
                .into_iter()
                .map(|s| UnitView {
                    unit: s.unit,
                    instance: s.instance,
                    purged: s.purged,
                })
                .collect::<Vec<_>>(),
        )
        .into_response(),
        Err(e) => internal(e),
    }
}

async fn usage(State(state): State<ApiState>, Path(scope): Path<String>, RawQuery(q): RawQuery) -> Response {
    let scope: Scope = match scope.parse() {
        Ok(s) => s,
        Err(e) => return (StatusCode::NOT_FOUND, Json(ErrorBody { error: format!("{e}") })).into_response(),
    };
    let p = params(q.as_deref());
    let Some(key) = param(&p, "key").filter(|k| !k.is_empty()) else {
        return bad_request("`key` is required".into());
    };
    let (start, end) = match (time_param(&p, "start"), time_param(&p, "end")) {
        (Ok(s), Ok(e)) => (s.unwrap_or(0), e.unwrap_or_else(|| state.clock.now_ms())),
        (Err(r), _) | (_, Err(r)) => return r,
    };
    let result = match scope {
        Scope::Unit => state.store.aggregate(&state.cluster_id, key).map(|a| match a {
            Some((m, _)) => m,
            None => combine(Scope::Unit, key, start, end, &[]),
        }),
        _ => state
            .store
            .scope_aggregates(scope, key, start, end)
            .map(|parts| combine(scope, key, start, end, &parts)),
    };
    match result {
        Ok(m) => Json(m).into_response(),
        Err(e) => internal(e),
    }
}

/// 200 when `user` owns every `uuid` on `cluster`, 403 otherwise.
async fn verify(State(state): State<ApiState>, RawQuery(q): RawQuery) -> Response {
    let p = params(q.as_deref());
    let Some(user) = param(&p, "user").filter(|u| !u.is_empty()) else {
        return bad_request("`user` is required".into());
    };
    let cluster = param(&p, "cluster")
        .filter(|c| !c.is_empty())
        .unwrap_or(&state.cluster_id);
    let uuids: Vec<&str> = p.iter().filter(|(k, _)| k == "uuid").map(|(_, v)| v.as_str()).collect();
    if uuids.is_empty() {
        return bad_request("at least one `uuid` is required".into());
    }
    for uuid in uuids {
        match state.store.is_owner(user, cluster, uuid) {
            Ok(true) => {}
            Ok(false) => return StatusCode::FORBIDDEN.into_response(),
            Err(e) => return internal(e),
        }
    }
    StatusCode::OK.into_response()
}
