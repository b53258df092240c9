//! Raw range reads and series deletion against a Prometheus-compatible API.

use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;

use crate::RegistryError;

/// One series of a range result.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSeries {
    pub labels: BTreeMap<String, String>,
    /// `(timestamp ms, value)`, oldest first.
    pub points: Vec<(i64, f64)>,
}

impl RangeSeries {
    pub fn metric_name(&self) -> &str {
        self.labels.get("__name__").map_or("", String::as_str)
    }

    pub fn label(&self, name: &str) -> Option<&str> {
        self.labels.get(name).map(String::as_str)
    }

    pub fn value_at(&self, ts: i64) -> Option<f64> {
        self.points
            .binary_search_by_key(&ts, |p| p.0)
            .ok()
            .map(|i| self.points[i].1)
    }
}

#[async_trait]
pub trait TsdbClient: Send + Sync {
    /// Every stored point of the series matched by `selector` in `[start, end]`.
    async fn query_range(&self, selector: &str, start_ms: i64, end_ms: i64) -> Result<Vec<RangeSeries>, RegistryError>;
    async fn delete_series(&self, selector: &str) -> Result<(), RegistryError>;
}

#[derive(Deserialize)]
struct Envelope {
    status: String,
    #[serde(default)]
    data: Option<MatrixData>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct MatrixData {
    #[serde(rename = "resultType")]
    result_type: String,
    result: Vec<MatrixSeries>,
}

#[derive(Deserialize)]
struct MatrixSeries {
    metric: BTreeMap<String, String>,
    values: Vec<(f64, String)>,
}

/// HTTP client with bounded retries: connection failures and 5xx answers
/// are retried with doubling backoff, 4xx answers fail at once.
#[derive(Debug, Clone)]
pub struct HttpTsdb {
    client: reqwest::Client,
    base: String,
    attempts: u32,
    backoff: Duration,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(String),
}

impl HttpTsdb {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, RegistryError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RegistryError::Tsdb(e.to_string()))?;
        Ok(Self {
            client,
            base: base.trim_end_matches('/').to_string(),
            attempts: 3,
            backoff: Duration::from_millis(200),
        })
    }

    pub fn with_retries(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    async fn retrying<T, F, Fut>(&self, what: &str, mut f: F) -> Result<T, RegistryError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Attempt<T>>,
    {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match f().await {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(RegistryError::Tsdb(format!("{what}: {e}"))),
                Attempt::Retry(e) => {
                    tracing::warn!(attempt, error = %e, "{what} failed");
                    last = e;
                }
            }
            if attempt < self.attempts {
                tokio::time::sleep(delay).await;
                delay *= 2;
            }
        }
        Err(RegistryError::Tsdb(format!(
            "{what}: giving up after {} attempts: {last}",
            self.attempts
        )))
    }
}

fn classify(status: reqwest::StatusCode, body: String) -> Attempt<String> {
    if status.is_success() {
        Attempt::Done(body)
    } else if status.is_server_error() {
        Attempt::Retry(format!("{status}: {body}"))
    } else {
        Attempt::Fail(format!("{status}: {body}"))
    }
}

fn parse_matrix(body: &str) -> Result<Vec<RangeSeries>, RegistryError> {
    let env: Envelope = serde_json::from_str(body).map_err(|e| RegistryError::Tsdb(format!("bad response: {e}")))?;
    if env.status != "success" {
        return Err(RegistryError::Tsdb(env.error.unwrap_or(env.status)));
    }
    let data = env
        .data
        .ok_or_else(|| RegistryError::Tsdb("response without data".into()))?;
    if data.result_type != "matrix" {
        return Err(RegistryError::Tsdb(format!(
            "expected a matrix, got {}",
            data.result_type
        )));
    }
    data.result
        .into_iter()
        .map(|s| {
            let points = s
                .values
                .into_iter()
                .map(|(t, v)| {
                    let v: f64 = v
                        .parse()
                        .map_err(|_| RegistryError::Tsdb(format!("bad sample value `{v}`")))?;
                    Ok(((t * 1000.0).round() as i64, v))
                })
                .collect::<Result<_, RegistryError>>()?;
            Ok(RangeSeries {
                labels: s.metric,
                points,
            })
        })
        .collect()
}

fn seconds(ms: i64) -> String {
    format!("{:.3}", ms as f64 / 1000.0)
}

#[async_trait]
impl TsdbClient for HttpTsdb {
    async fn query_range(&self, selector: &str, start_ms: i64, end_ms: i64) -> Result<Vec<RangeSeries>, RegistryError> {
        let url = format!("{}/api/v1/query_range", self.base);
        let (start, end) = (seconds(start_ms), seconds(end_ms));
        let body = self
            .retrying("query_range", || async {
                let form = [("query", selector), ("start", &start), ("end", &end), ("step", "15")];
                match self.client.post(&url).form(&form).send().await {
                    Ok(resp) => {
                        let status = resp.status();
                        match resp.text().await {
                            Ok(body) => classify(status, body),
                            Err(e) => Attempt::Retry(e.to_string()),
                        }
                    }
                    Err(e) => Attempt::Retry(e.to_string()),
                }
            })
            .await?;
        parse_matrix(&body)
    }

    async fn delete_series(&self, selector: &str) -> Result<(), RegistryError> {
        let url = format!("{}/api/v1/admin/tsdb/delete_series", self.base);
        self.retrying("delete_series", || async {
            match self.client.post(&url).form(&[("match[]", selector)]).send().await {
                Ok(resp) => {
                    let status = resp.status();
                    classify(status, resp.text().await.unwrap_or_default())
                }
                Err(e) => Attempt::Retry(e.to_string()),
            }
        })
        .await
        .map(|_| ())
    }
}
