//! Scrape driver: polls exporter endpoints, parses the exposition and
//! hands the samples to a TSDB with an added `instance` label.

use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use wattline_core::exposition::{parse_exposition, render_exposition, MetricFamily};
use wattline_core::Clock;

use crate::tsdb::MockTsdb;
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub instance: String,
    pub url: String,
}

/// Targets file: one `instance url` pair per line; `#` starts a comment.
pub fn parse_targets(text: &str) -> Result<Vec<Target>, SimError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(instance), Some(url), None) => out.push(Target {
                instance: instance.to_string(),
                url: url.to_string(),
            }),
            _ => {
                return Err(SimError::Targets {
                    line: i + 1,
                    message: "expected `instance url`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Where scraped samples go.
#[derive(Clone)]
pub enum Sink {
    Local(Arc<MockTsdb>),
    /// A mock TSDB's `/api/v1/import` endpoint.
    Remote {
        client: reqwest::Client,
        base: String,
    },
}

impl Sink {
    async fn push(
        &self,
        target: &Target,
        timestamp_ms: i64,
        body: &str,
        families: &[MetricFamily],
    ) -> Result<usize, String> {
        match self {
            Sink::Local(db) => Ok(db.ingest(&target.instance, timestamp_ms, families)),
            Sink::Remote { client, base } => {
                let resp = client
                    .post(format!("{}/api/v1/import", base.trim_end_matches('/')))
                    .query(&[
                        ("instance", target.instance.as_str()),
                        ("timestamp", &timestamp_ms.to_string()),
                    ])
                    .body(body.to_string())
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                if !resp.status().is_success() {
                    return Err(format!("import returned {}", resp.status()));
                }
                let v: serde_json::Value = resp.json().await.map_err(|e| e.to_string())?;
                Ok(v["data"]["appended"].as_u64().unwrap_or(0) as usize)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScrapeOptions {
    /// Endpoints polled at once.
    pub concurrency: usize,
    pub timeout: Duration,
    /// Re-render every parsed payload and compare it with the original.
    pub verify_round_trip: bool,
    pub basic_auth: Option<(String, String)>,
}

impl Default for ScrapeOptions {
    fn default() -> Self {
        Self {
            concurrency: 32,
            timeout: Duration::from_secs(10),
            verify_round_trip: false,
            basic_auth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetScrape {
    pub instance: String,
    pub up: bool,
    pub latency: Duration,
    pub samples: usize,
    pub appended: usize,
    pub parse_errors: usize,
    /// Payloads whose canonical re-render differed from the original.
    pub round_trip_mismatches: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrapeReport {
    pub timestamp_ms: i64,
    pub targets: Vec<TargetScrape>,
}

impl ScrapeReport {
    pub fn parse_errors(&self) -> usize {
        self.targets.iter().map(|t| t.parse_errors).sum()
    }

    pub fn round_trip_mismatches(&self) -> usize {
        self.targets.iter().map(|t| t.round_trip_mismatches).sum()
    }

    pub fn down(&self) -> Vec<&str> {
        self.targets
            .iter()
            .filter(|t| !t.up)
            .map(|t| t.instance.as_str())
            .collect()
    }

    pub fn samples(&self) -> usize {
        self.targets.iter().map(|t| t.samples).sum()
    }

    pub fn appended(&self) -> usize {
        self.targets.iter().map(|t| t.appended).sum()
    }

    pub fn max_latency(&self) -> Duration {
        self.targets.iter().map(|t| t.latency).max().unwrap_or_default()
    }
}

pub struct ScrapeDriver {
    client: reqwest::Client,
    targets: Vec<Target>,
    sink: Sink,
    options: ScrapeOptions,
}

impl ScrapeDriver {
    pub fn new(targets: Vec<Target>, sink: Sink, options: ScrapeOptions) -> Self {
        let client = reqwest::Client::builder()
            .timeout(options.timeout)
            .pool_max_idle_per_host(4)
            .build()
            .expect("static client configuration");
        Self {
            client,
            targets,
            sink,
            options,
        }
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// Polls every target once; samples are stamped `timestamp_ms`.
    pub async fn run_cycle(&self, timestamp_ms: i64) -> ScrapeReport {
        let targets = stream::iter(self.targets.iter())
            .map(|t| self.scrape_one(t, timestamp_ms))
            .buffered(self.options.concurrency.max(1))
            .collect()
            .await;
        ScrapeReport { timestamp_ms, targets }
    }

    /// Runs a cycle every `interval` of wall time, stamped with `clock`,
    /// until `cycles` are done or `shutdown` flips.
    pub async fn run(
        &self,
        clock: &dyn Clock,
        interval: Duration,
        cycles: Option<usize>,
        mut shutdown: tokio::sync::watch::Receiver<bool>,
    ) -> Vec<ScrapeReport> {
        let mut reports = Vec::new();
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        while cycles.is_none_or(|n| reports.len() < n) {
            tokio::select! {
                _ = ticker.tick() => {}
                _ = shutdown.changed() => break,
            }
            let report = self.run_cycle(clock.now_ms()).await;
            for t in report.targets.iter().filter(|t| !t.up) {
                tracing::warn!(instance = %t.instance, error = ?t.error, "target down");
            }
            reports.push(report);
            if *shutdown.borrow() {
                break;
            }
        }
        reports
    }

    async fn scrape_one(&self, target: &Target, timestamp_ms: i64) -> TargetScrape {
        let started = Instant::now();
        let mut out = TargetScrape {
            instance: target.instance.clone(),
            up: false,
            latency: Duration::ZERO,
            samples: 0,
            appended: 0,
            parse_errors: 0,
            round_trip_mismatches: 0,
            error: None,
        };
        let mut req = self.client.get(&target.url);
        if let Some((u, p)) = &self.options.basic_auth {
            req = req.basic_auth(u, Some(p));
        }
        let body = match req.send().await {
            Ok(resp) if resp.status().is_success() => resp.text().await.map_err(|e| e.to_string()),
            Ok(resp) => Err(format!("status {}", resp.status())),
            Err(e) => Err(e.to_string()),
        };
        out.latency = started.elapsed();
        let body = match body {
            Ok(b) => b,
            Err(e) => {
                out.error = Some(e);
                return out;
            }
        };
        out.up = true;
        let families = match parse_exposition(&body) {
            Ok(families) => families,
            Err(e) => {
                out.parse_errors = 1;
                out.error = Some(e.to_string());
                return out;
            }
        };
        out.samples = families.iter().map(|f| f.samples.len()).sum();
        if self.options.verify_round_trip && render_exposition(&families).ok().as_deref() != Some(body.as_str()) {
            out.round_trip_mismatches = 1;
        }
        match self.sink.push(target, timestamp_ms, &body, &families).await {
            Ok(n) => out.appended = n,
            Err(e) => out.error = Some(e),
        }
        out
    }
}
