//! The single writer: ingest, factor refresh, attribution, aggregation and
//! purge, run as one cycle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use wattline_core::emissions::FactorHistory;
use wattline_core::rules::MetricRole;
use wattline_core::workload::{parse_accounting, ResourceManager};
use wattline_core::{Clock, WorkloadUnit};
use wattline_emissions::FactorService;

use crate::aggregate::{aggregate_unit, UnitSamples};
use crate::attribute::{attribute_node, ProfileMatcher};
use crate::backup::BackupSchedule;
use crate::config::RegistryConfig;
use crate::purge::{is_short, workload_selector};
use crate::store::{PowerRow, Store, StoredUnit};
use crate::tsdb::{HttpTsdb, RangeSeries, TsdbClient};
use crate::RegistryError;

const GPU_MAP: &str = "wattline_workload_gpu";
const GPU_UTILIZATION: &str = "wattline_gpu_utilization_ratio";

/// A resource-manager adapter yielding accounting rows.
pub trait AccountingSource: Send + Sync {
    fn resource_manager(&self) -> ResourceManager;
    /// The accounting export as of now.
    fn fetch(&self) -> Result<String, RegistryError>;
}

/// Reads a sacct-style export from a file.
#[derive(Debug, Clone)]
pub struct FileSource {
    pub path: PathBuf,
}

impl AccountingSource for FileSource {
    fn resource_manager(&self) -> ResourceManager {
        ResourceManager::Slurm
    }

    fn fetch(&self) -> Result<String, RegistryError> {
        std::fs::read_to_string(&self.path).map_err(|e| RegistryError::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleOptions {
    pub cutoff_s: u64,
    pub settle_ms: i64,
    pub initial_lookback_ms: i64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            cutoff_s: 60,
            settle_ms: 60_000,
            initial_lookback_ms: 3_600_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub upserted: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleReport {
    pub now_ms: i64,
    pub ingest: IngestReport,
    pub factor: Option<f64>,
    pub instances: usize,
    /// Instances without a matching hardware profile.
    pub unmatched_instances: Vec<String>,
    pub power_samples: usize,
    pub skipped_instants: usize,
    pub aggregated: usize,
    pub finalized: usize,
    /// Selectors deleted from the TSDB in this cycle.
    pub deletions: Vec<String>,
    pub purge_failures: usize,
}

pub struct Registry {
    cluster_id: String,
    store: Arc<Store>,
    tsdb: Arc<dyn TsdbClient>,
    source: Box<dyn AccountingSource>,
    profiles: ProfileMatcher,
    factors: Option<(Arc<FactorService>, String)>,
    options: CycleOptions,
    clock: Arc<dyn Clock>,
    writer: tokio::sync::Mutex<()>,
}

impl Registry {
    pub fn new(
        cluster_id: &str,
        store: Arc<Store>,
        tsdb: Arc<dyn TsdbClient>,
        source: Box<dyn AccountingSource>,
        profiles: ProfileMatcher,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            cluster_id: cluster_id.to_string(),
            store,
            tsdb,
            source,
            profiles,
            factors: None,
            options: CycleOptions::default(),
            clock,
            writer: tokio::sync::Mutex::new(()),
        }
    }

    /// Refresh emission factors for `region` every cycle.
    pub fn with_factors(mut self, service: Arc<FactorService>, region: &str) -> Self {
        self.factors = Some((service, region.to_string()));
        self
    }

    pub fn with_options(mut self, options: CycleOptions) -> Self {
        self.options = options;
        self
    }

    pub fn from_config(cfg: &RegistryConfig, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        cfg.validate().map_err(RegistryError::Config)?;
        let store = Arc::new(Store::open(&cfg.database)?);
        let tsdb = HttpTsdb::new(&cfg.tsdb.url, Duration::from_secs(cfg.tsdb.timeout_seconds))?
            .with_retries(cfg.tsdb.attempts, Duration::from_millis(500));
        let mut registry = Self::new(
            &cfg.cluster_id,
            store,
            Arc::new(tsdb),
            Box::new(FileSource {
                path: cfg.accounting_file.clone(),
            }),
            ProfileMatcher::new(&cfg.profiles)?,
            clock.clone(),
        )
        .with_options(CycleOptions {
            cutoff_s: cfg.cutoff_seconds,
            settle_ms: cfg.settle_seconds as i64 * 1000,
            initial_lookback_ms: cfg.initial_lookback_seconds as i64 * 1000,
        });
        if let Some(e) = &cfg.emissions {
            let service = FactorService::from_config(e, clock).map_err(RegistryError::Config)?;
            registry = registry.with_factors(Arc::new(service), &e.region);
        }
        Ok(registry)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn cluster_id(&self) -> &str {
        &self.cluster_id
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Upserts every well-formed row of the accounting source.
    pub async fn ingest(&self) -> Result<IngestReport, RegistryError> {
        let _w = self.writer.lock().await;
        self.ingest_locked()
    }

    fn ingest_locked(&self) -> Result<IngestReport, RegistryError> {
        let text = self.source.fetch()?;
        let (mut units, errors) = parse_accounting(&text, &self.cluster_id);
        let manager = self.source.resource_manager();
        for u in &mut units {
            u.resource_manager = manager;
        }
        let upserted = self.store.upsert_units(&units)?;
        if !errors.is_empty() {
            tracing::warn!(count = errors.len(), "malformed accounting rows skipped");
        }
        Ok(IngestReport {
            upserted,
            errors: errors.iter().map(ToString::to_string).collect(),
        })
    }

    /// Runs ingest, factor refresh, attribution, aggregation and purge.
    pub async fn run_cycle(&self) -> Result<CycleReport, RegistryError> {
        let _w = self.writer.lock().await;
        let now = self.clock.now_ms();
        let mut report = CycleReport {
            now_ms: now,
            ..Default::default()
        };
        match self.ingest_locked() {
            Ok(r) => report.ingest = r,
            Err(e @ RegistryError::Store(_)) => return Err(e),
            Err(e) => {
                tracing::warn!(error = %e, "accounting source unavailable");
                report.ingest.errors.push(e.to_string());
            }
        }
        report.factor = self.refresh_factor(now).await?;
        self.attribute(now, &mut report).await?;
        self.aggregate(now, &mut report).await?;
        self.purge(&mut report).await?;
        Ok(report)
    }

    async fn refresh_factor(&self, now: i64) -> Result<Option<f64>, RegistryError> {
        let Some((service, region)) = &self.factors else {
            return Ok(None);
        };
        match service.factor(region).await {
            Ok(f) => {
                self.store.insert_factor(region, now, f.grams_per_kwh)?;
                Ok(Some(f.grams_per_kwh))
            }
            Err(e) => {
                tracing::warn!(region, error = %e, "no emission factor this cycle");
                Ok(None)
            }
        }
    }

    async fn attribute(&self, now: i64, report: &mut CycleReport) -> Result<(), RegistryError> {
        let discovery = self
            .tsdb
            .query_range(
                MetricRole::NodeCpu.default_family(),
                now - self.options.initial_lookback_ms,
                now,
            )
            .await?;
        let instances: BTreeSet<String> = discovery
            .iter()
            .filter_map(|s| s.label("instance").map(str::to_string))
            .collect();
        report.instances = instances.len();
        for instance in instances {
            let Some(named) = self.profiles.profile_for(&instance) else {
                report.unmatched_instances.push(instance);
                continue;
            };
            let profile = named.profile();
            let watermark = self.store.watermark(&instance)?;
            let start = watermark.unwrap_or(now - self.options.initial_lookback_ms);
            let selector = format!(
                "{{instance=\"{}\"}}",
                instance.replace('\\', "\\\\").replace('"', "\\\"")
            );
            let series = self.tsdb.query_range(&selector, start, now).await?;
            let run = attribute_node(&series, &profile, watermark);
            report.skipped_instants += run.skipped.len();
            for (ts, why) in run.skipped.iter().take(3) {
                tracing::debug!(%instance, ts, why, "instant skipped");
            }
            let mut rows = Vec::new();
            let mut residual = Vec::new();
            for att in &run.attributions {
                residual.push((att.timestamp_ms, att.unattributed_watts));
                for w in &att.workloads {
                    rows.push((
                        w.workload_id.clone(),
                        PowerRow {
                            timestamp_ms: att.timestamp_ms,
                            watts: w.watts,
                            cpu_watts: w.cpu_watts,
                            dram_watts: w.dram_watts,
                            network_watts: w.network_watts,
                        },
                    ));
                }
            }
            rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.timestamp_ms.cmp(&b.1.timestamp_ms)));
            report.power_samples += self.store.insert_power(&self.cluster_id, &instance, &rows)?;
            self.store.insert_residual(&instance, &residual)?;
            if let Some(wm) = run.watermark {
                self.store.set_watermark(&instance, wm)?;
            }
        }
        Ok(())
    }

    async fn unit_samples(&self, stored: &StoredUnit, end: i64) -> Result<UnitSamples, RegistryError> {
        let unit = &stored.unit;
        let power = self.store.power(&self.cluster_id, &unit.uuid)?;
        let raw = self
            .tsdb
            .query_range(&workload_selector(&unit.uuid), unit.started_at_ms, end)
            .await?;
        let mut samples = UnitSamples {
            power,
            ..Default::default()
        };
        let mut gpus: BTreeMap<(String, String), ()> = BTreeMap::new();
        for s in raw {
            match s.metric_name() {
                n if n == MetricRole::WorkloadCpu.default_family() => samples.cpu.push(s),
                n if n == MetricRole::WorkloadMemory.default_family() => samples.memory.push(s),
                GPU_MAP => {
                    if let (Some(i), Some(g)) = (s.label("instance"), s.label("gpu_uuid")) {
                        gpus.insert((i.to_string(), g.to_string()), ());
                    }
                }
                _ => {}
            }
        }
        for (instance, gpu) in gpus.keys() {
            let selector = format!("{GPU_UTILIZATION}{{instance=\"{instance}\",gpu_uuid=\"{gpu}\"}}");
            let series: Vec<RangeSeries> = self.tsdb.query_range(&selector, unit.started_at_ms, end).await?;
            samples
                .gpu_utilization
                .extend(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        }
        Ok(samples)
    }

    async fn aggregate(&self, now: i64, report: &mut CycleReport) -> Result<(), RegistryError> {
        let history = match &self.factors {
            Some((_, region)) => FactorHistory::new(self.store.factors(region)?),
            None => FactorHistory::default(),
        };
        for stored in self.store.units_needing_aggregation(&self.cluster_id)? {
            let unit: &WorkloadUnit = &stored.unit;
            if unit.started_at_ms > now {
                continue;
            }
            let end = unit.ended_at_ms.unwrap_or(now).min(now);
            let samples = self.unit_samples(&stored, end).await?;
            let metrics = aggregate_unit(unit, &samples, &history, now)?;
            let is_final = unit.ended_at_ms.is_some_and(|e| now >= e + self.options.settle_ms);
            self.store.put_aggregate(&self.cluster_id, &metrics, is_final)?;
            report.aggregated += 1;
            if is_final {
                report.finalized += 1;
            }
        }
        Ok(())
    }

    async fn purge(&self, report: &mut CycleReport) -> Result<(), RegistryError> {
        for stored in self.store.finalized_unpurged(&self.cluster_id)? {
            if is_short(&stored.unit, self.options.cutoff_s) {
                let uuid = &stored.unit.uuid;
                self.store
                    .enqueue_purge(&self.cluster_id, uuid, &workload_selector(uuid))?;
            }
        }
        for p in self.store.pending_purges()? {
            match self.tsdb.delete_series(&p.selector).await {
                Ok(()) => {
                    self.store.complete_purge(&p.cluster_id, &p.uuid)?;
                    report.deletions.push(p.selector);
                }
                Err(e) => {
                    tracing::warn!(uuid = %p.uuid, attempts = p.attempts + 1, error = %e, "series deletion failed");
                    self.store.fail_purge(&p.cluster_id, &p.uuid, &e.to_string())?;
                    report.purge_failures += 1;
                }
            }
        }
        Ok(())
    }

    /// Runs cycles every `interval` and snapshots per `backup` until
    /// `shutdown` flips. Failed cycles are logged and retried next tick.
    pub async fn run(
        self: Arc<Self>,
        interval: Duration,
        mut backup: Option<BackupSchedule>,
        mut shutdown: tokio::sync::watch::Receiver<bool>,
    ) {
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => {}
                _ = shutdown.changed() => break,
            }
            match self.run_cycle().await {
                Ok(r) => tracing::info!(
                    upserted = r.ingest.upserted,
                    samples = r.power_samples,
                    aggregated = r.aggregated,
                    deletions = r.deletions.len(),
                    "registry cycle done"
                ),
                Err(e) => tracing::error!(error = %e, "registry cycle failed"),
            }
            if let Some(b) = backup.as_mut() {
                let _w = self.writer.lock().await;
                match b.poll(&self.store, self.clock.now_ms()) {
                    Ok(Some(path)) => tracing::info!(path = %path.display(), "snapshot written"),
                    Ok(None) => {}
                    Err(e) => tracing::error!(error = %e, "snapshot failed"),
                }
            }
        }
    }
}
