//! In-memory TSDB serving raw series by label matchers.
//!
//! Only plain selectors are understood; anything else is answered with 422.
//! Range queries return every stored point in `[start, end]` (no step
//! alignment); instant queries return the latest point at or before
//! `time` within a five minute lookback.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::Serialize;
use wattline_core::exposition::{parse_exposition, MetricFamily};
use wattline_core::selector::{parse_selector, Selector, METRIC_NAME_LABEL};
use wattline_core::LabelSet;

const LOOKBACK_MS: i64 = 300_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Append {
    Appended,
    Duplicate,
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub metric_name: String,
    pub labels: LabelSet,
    pub points: Vec<(i64, f64)>,
}

#[derive(Default)]
struct Store {
    series: Vec<Option<Series>>,
    by_key: HashMap<(String, LabelSet), usize>,
    /// (label, value) to series ids; `__name__` indexes the metric name.
    postings: HashMap<(String, String), Vec<usize>>,
    live: usize,
}

impl Store {
    fn candidates(&self, sel: &Selector) -> Vec<usize> {
        let mut lists: Vec<&Vec<usize>> = Vec::new();
        let empty = Vec::new();
        if let Some(m) = &sel.metric {
            lists.push(
                self.postings
                    .get(&(METRIC_NAME_LABEL.to_string(), m.clone()))
                    .unwrap_or(&empty),
            );
        }
        for m in &sel.matchers {
            if m.op == wattline_core::selector::MatchOp::Equal && !m.value.is_empty() {
                lists.push(self.postings.get(&(m.name.clone(), m.value.clone())).unwrap_or(&empty));
            }
        }
        match lists.iter().min_by_key(|l| l.len()) {
            Some(l) => (*l).clone(),
            None => (0..self.series.len()).collect(),
        }
    }

    fn select(&self, sel: &Selector) -> Vec<usize> {
        self.candidates(sel)
            .into_iter()
            .filter(|&id| {
                self.series[id]
                    .as_ref()
                    .is_some_and(|s| sel.matches(&s.metric_name, &s.labels))
            })
            .collect()
    }
}

/// Request counters, for asserting what reached the backend.
#[derive(Debug, Default)]
pub struct Counters {
    pub query: AtomicU64,
    pub query_range: AtomicU64,
    pub delete_series: AtomicU64,
    pub import: AtomicU64,
    pub rejected: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub query: u64,
    pub query_range: u64,
    pub delete_series: u64,
    pub import: u64,
    pub rejected: u64,
}

impl CounterSnapshot {
    /// Read requests of any kind.
    pub fn reads(&self) -> u64 {
        self.query + self.query_range
    }
}

#[derive(Default)]
pub struct MockTsdb {
    store: RwLock<Store>,
    deleted: RwLock<Vec<String>>,
    counters: Counters,
    appended: AtomicU64,
}

impl std::fmt::Debug for MockTsdb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockTsdb")
            .field("series", &self.series_count())
            .finish()
    }
}

impl MockTsdb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, metric_name: &str, labels: &LabelSet, timestamp_ms: i64, value: f64) -> Append {
        let mut store = self.store.write();
        self.push_locked(&mut store, metric_name, labels, timestamp_ms, value)
    }

    fn push_locked(&self, store: &mut Store, metric_name: &str, labels: &LabelSet, ts: i64, value: f64) -> Append {
        let key = (metric_name.to_string(), labels.clone());
        let id = match store.by_key.get(&key) {
            Some(&id) => id,
            None => {
                let id = store.series.len();
                store.series.push(Some(Series {
                    metric_name: metric_name.to_string(),
                    labels: labels.clone(),
                    points: Vec::new(),
                }));
                store
                    .postings
                    .entry((METRIC_NAME_LABEL.to_string(), metric_name.to_string()))
                    .or_default()
                    .push(id);
                for (k, v) in labels.iter() {
                    store
                        .postings
                        .entry((k.to_string(), v.to_string()))
                        .or_default()
                        .push(id);
                }
                store.by_key.insert(key, id);
                store.live += 1;
                id
            }
        };
        let series = store.series[id].as_mut().expect("indexed series is live");
        match series.points.last() {
            Some(&(t, _)) if t == ts => Append::Duplicate,
            Some(&(t, _)) if t > ts => Append::OutOfOrder,
            _ => {
                series.points.push((ts, value));
                self.appended.fetch_add(1, Ordering::Relaxed);
                Append::Appended
            }
        }
    }

    /// Stores every sample of `families` at `timestamp_ms` with an added
    /// `instance` label. Returns the number of points appended.
    pub fn ingest(&self, instance: &str, timestamp_ms: i64, families: &[MetricFamily]) -> usize {
        let mut store = self.store.write();
        let mut n = 0;
        for fam in families {
            for s in &fam.samples {
                let Ok(labels) = s.labels.with("instance", instance) else {
                    continue;
                };
                let ts = s.timestamp_ms.unwrap_or(timestamp_ms);
                if self.push_locked(&mut store, &s.metric_name, &labels, ts, s.value) == Append::Appended {
                    n += 1;
                }
            }
        }
        n
    }

    /// Series selected by `sel`, restricted to points in `[start, end]`.
    pub fn select(&self, sel: &Selector, start_ms: i64, end_ms: i64) -> Vec<Series> {
        let store = self.store.read();
        let mut out: Vec<Series> = store
            .select(sel)
            .into_iter()
            .filter_map(|id| {
                let s = store.series[id].as_ref()?;
                let lo = s.points.partition_point(|p| p.0 < start_ms);
                let hi = s.points.partition_point(|p| p.0 <= end_ms);
                (lo < hi).then(|| Series {
                    metric_name: s.metric_name.clone(),
                    labels: s.labels.clone(),
                    points: s.points[lo..hi].to_vec(),
                })
            })
            .collect();
        out.sort_by(|a, b| (&a.metric_name, &a.labels).cmp(&(&b.metric_name, &b.labels)));
        out
    }

    /// Drops every series selected by `sel`; returns how many went.
    pub fn delete(&self, sel: &Selector) -> usize {
        let mut store = self.store.write();
        let ids = store.select(sel);
        for &id in &ids {
            if let Some(s) = store.series[id].take() {
                store.by_key.remove(&(s.metric_name, s.labels));
                store.live -= 1;
            }
        }
        self.deleted.write().push(sel.to_string());
        ids.len()
    }

    pub fn series_count(&self) -> usize {
        self.store.read().live
    }

    /// Points currently stored across live series.
    pub fn point_count(&self) -> usize {
        let store = self.store.read();
        store.series.iter().flatten().map(|s| s.points.len()).sum()
    }

    /// Points ever appended, including those of deleted series.
    pub fn appended(&self) -> u64 {
        self.appended.load(Ordering::Relaxed)
    }

    /// Selectors received by the delete endpoint, in order.
    pub fn deleted_selectors(&self) -> Vec<String> {
        self.deleted.read().clone()
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        CounterSnapshot {
            query: c.query.load(Ordering::SeqCst),
            query_range: c.query_range.load(Ordering::SeqCst),
            delete_series: c.delete_series.load(Ordering::SeqCst),
            import: c.import.load(Ordering::SeqCst),
            rejected: c.rejected.load(Ordering::SeqCst),
        }
    }

    /// Loads the series a scrape of the manifest's cluster would have
    /// produced for workloads and node power, plus the attributed power.
    pub fn load_manifest(&self, records: &[crate::manifest::Record]) -> usize {
        use crate::manifest::Record;
        let Some(Record::Cluster(c)) = records.first() else {
            return 0;
        };
        let dt = c.interval_ms as f64 / 1000.0;
        let at = |k: usize| c.start_ms + k as i64 * c.interval_ms;
        let mut n = 0;
        for r in records {
            match r {
                Record::Node(node) => {
                    let labels = LabelSet::new([("instance", node.instance.as_str()), ("source", "ipmi_dcmi")])
                        .expect("static label names");
                    for (k, w) in node.ipmi_watts.iter().enumerate() {
                        self.push("wattline_node_power_watts", &labels, at(k), *w as f64);
                        n += 1;
                    }
                }
                Record::Job(job) => {
                    let labels = LabelSet::new([
                        ("instance", job.instance.as_str()),
                        ("workload_id", job.unit.uuid.as_str()),
                    ])
                    .expect("static label names");
                    let mut cpu = 0.0;
                    self.push("wattline_cpu_seconds_total", &labels, at(job.start_instant), 0.0);
                    self.push("wattline_memory_bytes", &labels, at(job.start_instant), 0.0);
                    for (i, k) in (job.start_instant + 1..=job.end_instant).enumerate() {
                        cpu += job.cpu_rate[i] * dt;
                        self.push("wattline_cpu_seconds_total", &labels, at(k), cpu);
                        self.push("wattline_memory_bytes", &labels, at(k), job.memory_bytes[i] as f64);
                        self.push(
                            wattline_core::rules::RECORD_NAME,
                            &labels,
                            at(k),
                            job.attributed_watts[i],
                        );
                        n += 3;
                    }
                    n += 2;
                }
                _ => {}
            }
        }
        n
    }
}

// ---- HTTP ----

#[derive(Serialize)]
struct Success<T> {
    status: &'static str,
    data: T,
}

#[derive(Serialize)]
struct Failure {
    status: &'static str,
    #[serde(rename = "errorType")]
    error_type: &'static str,
    error: String,
}

#[derive(Serialize)]
struct ResultData<T> {
    #[serde(rename = "resultType")]
    result_type: &'static str,
    result: Vec<T>,
}

#[derive(Serialize)]
struct MatrixSeries {
    metric: BTreeMap<String, String>,
    values: Vec<(f64, String)>,
}

#[derive(Serialize)]
struct VectorSample {
    metric: BTreeMap<String, String>,
    value: (f64, String),
}

fn metric_map(s: &Series) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = s.labels.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    m.insert(METRIC_NAME_LABEL.to_string(), s.metric_name.clone());
    m
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "+Inf" } else { "-Inf" }.into()
    } else {
        format!("{v}")
    }
}

fn seconds(ms: i64) -> f64 {
    ms as f64 / 1000.0
}

/// Accepts Unix seconds (fractional allowed) or RFC 3339.
pub fn parse_time_param(s: &str) -> Option<i64> {
    if let Ok(secs) = s.parse::<f64>() {
        return secs.is_finite().then(|| (secs * 1000.0).round() as i64);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.timestamp_millis())
}

fn fail(status: StatusCode, error_type: &'static str, error: String) -> Response {
    (
        status,
        Json(Failure {
            status: "error",
            error_type,
            error,
        }),
    )
        .into_response()
}

/// Query parameters from the URL and, for form posts, the body.
pub fn request_params(query: Option<&str>, body: &[u8]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = url::form_urlencoded::parse(query.unwrap_or("").as_bytes())
        .into_owned()
        .collect();
    out.extend(url::form_urlencoded::parse(body).into_owned());
    out
}

fn param<'a>(params: &'a [(String, String)], name: &str) -> Option<&'a str> {
    params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

pub fn router(tsdb: Arc<MockTsdb>) -> Router {
    Router::new()
        .route("/api/v1/query_range", get(query_range).post(query_range))
        .route("/api/v1/query", get(query).post(query))
        .route(
            "/api/v1/admin/tsdb/delete_series",
            post(delete_series).put(delete_series),
        )
        .route("/api/v1/import", post(import))
        .route("/api/v1/status/counters", get(counters))
        .route("/-/healthy", get(|| async { "ok" }))
        .with_state(tsdb)
}

#[allow(clippy::result_large_err)]
fn parse_query(tsdb: &MockTsdb, params: &[(String, String)]) -> Result<Selector, Response> {
    let Some(q) = param(params, "query") else {
        tsdb.counters.rejected.fetch_add(1, Ordering::SeqCst);
        return Err(fail(StatusCode::BAD_REQUEST, "bad_data", "missing `query`".into()));
    };
    parse_selector(q).map_err(|e| {
        tsdb.counters.rejected.fetch_add(1, Ordering::SeqCst);
        fail(
            StatusCode::UNPROCESSABLE_ENTITY,
            "execution",
            format!("unsupported expression: {e}"),
        )
    })
}

async fn query_range(State(tsdb): State<Arc<MockTsdb>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    tsdb.counters.query_range.fetch_add(1, Ordering::SeqCst);
    let params = request_params(q.as_deref(), &body);
    let sel = match parse_query(&tsdb, &params) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let (Some(start), Some(end)) = (
        param(&params, "start").and_then(parse_time_param),
        param(&params, "end").and_then(parse_time_param),
    ) else {
        return fail(
            StatusCode::BAD_REQUEST,
            "bad_data",
            "`start` and `end` are required".into(),
        );
    };
    if end < start {
        return fail(StatusCode::BAD_REQUEST, "bad_data", "`end` precedes `start`".into());
    }
    let result = tsdb
        .select(&sel, start, end)
        .iter()
        .map(|s| MatrixSeries {
            metric: metric_map(s),
            values: s.points.iter().map(|&(t, v)| (seconds(t), format_value(v))).collect(),
        })
        .collect();
    Json(Success {
        status: "success",
        data: ResultData {
            result_type: "matrix",
            result,
        },
    })
    .into_response()
}

async fn query(State(tsdb): State<Arc<MockTsdb>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    tsdb.counters.query.fetch_add(1, Ordering::SeqCst);
    let params = request_params(q.as_deref(), &body);
    let sel = match parse_query(&tsdb, &params) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let time = match param(&params, "time") {
        Some(t) => match parse_time_param(t) {
            Some(t) => t,
            None => return fail(StatusCode::BAD_REQUEST, "bad_data", format!("invalid time `{t}`")),
        },
        None => i64::MAX,
    };
    let result = tsdb
        .select(&sel, time.saturating_sub(LOOKBACK_MS), time)
        .iter()
        .filter_map(|s| {
            let &(t, v) = s.points.last()?;
            Some(VectorSample {
                metric: metric_map(s),
                value: (seconds(t), format_value(v)),
            })
        })
        .collect();
    Json(Success {
        status: "success",
        data: ResultData {
            result_type: "vector",
            result,
        },
    })
    .into_response()
}

async fn delete_series(State(tsdb): State<Arc<MockTsdb>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    tsdb.counters.delete_series.fetch_add(1, Ordering::SeqCst);
    let params = request_params(q.as_deref(), &body);
    let matches: Vec<&str> = params
        .iter()
        .filter(|(k, _)| k == "match[]")
        .map(|(_, v)| v.as_str())
        .collect();
    if matches.is_empty() {
        return fail(StatusCode::BAD_REQUEST, "bad_data", "no `match[]` given".into());
    }
    let mut selectors = Vec::new();
    for m in matches {
        match parse_selector(m) {
            Ok(s) => selectors.push(s),
            Err(e) => {
                return fail(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "execution",
                    format!("unsupported selector: {e}"),
                )
            }
        }
    }
    for s in &selectors {
        tsdb.delete(s);
    }
    StatusCode::NO_CONTENT.into_response()
}

/// Body: text exposition; params `instance` and `timestamp` (ms).
async fn import(State(tsdb): State<Arc<MockTsdb>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    tsdb.counters.import.fetch_add(1, Ordering::SeqCst);
    let params = request_params(q.as_deref(), &[]);
    let (Some(instance), Some(ts)) = (
        param(&params, "instance"),
        param(&params, "timestamp").and_then(|t| t.parse::<i64>().ok()),
    ) else {
        return fail(
            StatusCode::BAD_REQUEST,
            "bad_data",
            "`instance` and `timestamp` are required".into(),
        );
    };
    let Ok(text) = std::str::from_utf8(&body) else {
        return fail(StatusCode::BAD_REQUEST, "bad_data", "body is not UTF-8".into());
    };
    match parse_exposition(text) {
        Ok(families) => {
            let n = tsdb.ingest(instance, ts, &families);
            Json(serde_json::json!({ "status": "success", "data": { "appended": n } })).into_response()
        }
        Err(e) => fail(StatusCode::BAD_REQUEST, "bad_data", e.to_string()),
    }
}

async fn counters(State(tsdb): State<Arc<MockTsdb>>) -> Json<CounterSnapshot> {
    Json(tsdb.counters())
}
