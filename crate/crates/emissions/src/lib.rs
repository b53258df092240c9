//! Emission factor acquisition: a realtime HTTP provider in front of a
//! static table, with a TTL cache and one in-flight fetch per region.
//!
//! Resolution order is realtime, then static, then an error. Realtime
//! answers are cached; static fallbacks are not, so the realtime provider is
//! retried on the next call.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use url::Url;
use wattline_core::emissions::{EmissionsError, FactorCache, StaticFactorTable};
use wattline_core::{Clock, Factor, FactorProvider};

pub const TOKEN_ENV: &str = "WATTLINE_EMISSION_TOKEN";
pub const DEFAULT_TTL_SECONDS: u64 = 300;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("provider answered {0}")]
    Status(u16),
    #[error("provider returned region `{got}` for `{want}`")]
    RegionMismatch { want: String, got: String },
    #[error("provider returned an invalid intensity {0}")]
    BadValue(f64),
    #[error("invalid provider url: {0}")]
    Url(#[from] url::ParseError),
}

#[derive(Debug, Deserialize)]
struct LatestBody {
    region: String,
    carbon_intensity: f64,
}

/// Client for `GET <base>/latest?region=<code>`.
#[derive(Debug, Clone)]
pub struct RealtimeProvider {
    latest: Url,
    client: reqwest::Client,
    token: Option<String>,
}

impl RealtimeProvider {
    /// Picks up a bearer token from the environment when set.
    pub fn new(base: &str, timeout: Duration) -> Result<Self, FetchError> {
        let mut base = Url::parse(base)?;
        if !base.path().ends_with('/') {
            base.set_path(&format!("{}/", base.path()));
        }
        let client = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            latest: base.join("latest")?,
            client,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub async fn fetch(&self, region: &str, now_ms: i64) -> Result<Factor, FetchError> {
        let mut req = self.client.get(self.latest.clone()).query(&[("region", region)]);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await?;
        if !resp.status().is_success() {
            return Err(FetchError::Status(resp.status().as_u16()));
        }
        let body: LatestBody = resp.json().await?;
        if body.region != region {
            return Err(FetchError::RegionMismatch {
                want: region.to_string(),
                got: body.region,
            });
        }
        if !body.carbon_intensity.is_finite() || body.carbon_intensity < 0.0 {
            return Err(FetchError::BadValue(body.carbon_intensity));
        }
        Ok(Factor {
            region: body.region,
            grams_per_kwh: body.carbon_intensity,
            timestamp_ms: now_ms,
            provider: FactorProvider::Realtime,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealtimeConfig {
    pub url: String,
    #[serde(default = "default_ttl")]
    pub cache_ttl_seconds: u64,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
}

fn default_ttl() -> u64 {
    DEFAULT_TTL_SECONDS
}

fn default_timeout() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionsConfig {
    /// Region whose grid feeds the cluster.
    pub region: String,
    #[serde(default)]
    pub static_table: Option<PathBuf>,
    #[serde(default)]
    pub realtime: Option<RealtimeConfig>,
}

impl EmissionsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.region.is_empty() {
            return Err("emissions.region must be non-empty".into());
        }
        if self.static_table.is_none() && self.realtime.is_none() {
            return Err("emissions needs `static_table`, `realtime` or both".into());
        }
        if let Some(rt) = &self.realtime {
            Url::parse(&rt.url).map_err(|e| format!("emissions.realtime.url `{}`: {e}", rt.url))?;
        }
        Ok(())
    }
}

/// Resolves factors for regions through the realtime, static, error chain.
#[derive(Debug)]
pub struct FactorService {
    realtime: Option<RealtimeProvider>,
    table: Option<StaticFactorTable>,
    cache: FactorCache,
    clock: Arc<dyn Clock>,
    flights: std::sync::Mutex<HashMap<String, Arc<Mutex<()>>>>,
    fetches: AtomicU64,
}

impl FactorService {
    pub fn new(
        realtime: Option<RealtimeProvider>,
        table: Option<StaticFactorTable>,
        ttl: Duration,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            realtime,
            table,
            cache: FactorCache::new(ttl.as_millis() as i64),
            clock,
            flights: std::sync::Mutex::new(HashMap::new()),
            fetches: AtomicU64::new(0),
        }
    }

    pub fn from_config(cfg: &EmissionsConfig, clock: Arc<dyn Clock>) -> Result<Self, String> {
        cfg.validate()?;
        let table = cfg
            .static_table
            .as_ref()
            .map(|p| StaticFactorTable::load(p, clock.now_ms()).map_err(|e| format!("{}: {e}", p.display())))
            .transpose()?;
        let (realtime, ttl) = match &cfg.realtime {
            Some(rt) => (
                Some(
                    RealtimeProvider::new(&rt.url, Duration::from_secs(rt.timeout_seconds))
                        .map_err(|e| e.to_string())?,
                ),
                rt.cache_ttl_seconds,
            ),
            None => (None, DEFAULT_TTL_SECONDS),
        };
        Ok(Self::new(realtime, table, Duration::from_secs(ttl), clock))
    }

    /// Number of realtime requests issued so far.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    pub async fn factor(&self, region: &str) -> Result<Factor, EmissionsError> {
        let Some(realtime) = &self.realtime else {
            return self.static_factor(region, "no realtime provider configured".into());
        };
        if let Some(f) = self.cache.get_fresh(region, self.clock.now_ms()) {
            return Ok(f);
        }
        let flight = {
            let mut flights = self.flights.lock().unwrap_or_else(|e| e.into_inner());
            flights.entry(region.to_string()).or_default().clone()
        };
        let _guard = flight.lock().await;
        // Another task may have filled the cache while we waited.
        let now = self.clock.now_ms();
        if let Some(f) = self.cache.get_fresh(region, now) {
            return Ok(f);
        }
        self.fetches.fetch_add(1, Ordering::Relaxed);
        match realtime.fetch(region, now).await {
            Ok(f) => {
                self.cache.insert(f.clone());
                Ok(f)
            }
            Err(e) => {
                tracing::warn!(region, error = %e, "realtime emission factor unavailable");
                self.static_factor(region, e.to_string())
            }
        }
    }

    fn static_factor(&self, region: &str, reason: String) -> Result<Factor, EmissionsError> {
        match &self.table {
            Some(t) => t.lookup(region),
            None => Err(EmissionsError::Unavailable {
                region: region.to_string(),
                reason,
            }),
        }
    }
}
