use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use wattline_core::rules::NamedProfile;
use wattline_core::workload::ResourceManager;
use wattline_core::{Clock, ManualClock, Scope};
use wattline_emissions::{FactorService, RealtimeProvider};
use wattline_registry::{AccountingSource, CycleOptions, HttpTsdb, ProfileMatcher, Registry, RegistryError, Store};
use wattline_sim::{
    generate, ClusterSpec, FactorServer, MockTsdb, ScrapeDriver, ScrapeOptions, SimCluster, Sink, Trace,
};

const SPEC: &str = r#"
seed = 5
duration_s = 7200
node_count = 4
job_rate_per_day = 1200
mean_job_duration_s = 600.0
short_job_fraction = 0.3
user_count = 3
project_count = 2

[emission_factor]
base_grams_per_kwh = 60.0
amplitude_grams_per_kwh = 25.0

[profiles.intel]
nodes = 2
rapl_domains = ["cpu_package", "dram"]

[profiles.amd]
nodes = 1
rapl_domains = ["cpu_package"]
network_fraction = 0.05
storage_fraction = 0.02

[profiles.gpu]
nodes = 1
rapl_domains = ["cpu_package"]
ipmi_includes_gpu = true
gpus_per_node = 2
"#;

/// Accounting rows as the resource manager reports them at the clock's now.
struct TraceSource {
    trace: Arc<Trace>,
    clock: Arc<dyn Clock>,
}

impl AccountingSource for TraceSource {
    fn resource_manager(&self) -> ResourceManager {
        ResourceManager::Slurm
    }

    fn fetch(&self) -> Result<String, RegistryError> {
        Ok(self.trace.accounting_as_of(self.clock.now_ms()))
    }
}

async fn serve(router: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

/// Trapezoidal energy (kWh) and emissions (g) over a job's attributed
/// samples, each segment priced at the factor in force at its start.
fn oracle(trace: &Trace, job: usize) -> (f64, f64) {
    let j = &trace.jobs[job];
    let points: Vec<(i64, f64)> = (j.start + 1..=j.end)
        .map(|k| (trace.time_of(k), j.attributed[k - j.start - 1].watts))
        .collect();
    let mut kwh = 0.0;
    let mut grams = 0.0;
    for w in points.windows(2) {
        let seg = 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0) as f64 / 3.6e9;
        kwh += seg;
        grams += seg * trace.factor_at(w[0].0);
    }
    (kwh, grams)
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-6 * want.abs().max(1e-9)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn two_hours_end_to_end_match_the_trace() {
    let spec = ClusterSpec::parse(SPEC).unwrap();
    let trace = Arc::new(generate(&spec).unwrap());
    assert!(trace.jobs.len() > 10 && trace.short_job_count() > 0);
    let clock = Arc::new(ManualClock::new(trace.start_ms));
    let dyn_clock = clock.clone() as Arc<dyn Clock>;

    let cluster = SimCluster::start(trace.clone(), dyn_clock.clone(), Vec::new())
        .await
        .unwrap();
    let db = Arc::new(MockTsdb::new());
    let tsdb_url = serve(wattline_sim::tsdb::router(db.clone())).await;
    let factors = Arc::new(FactorServer::for_trace(&trace, dyn_clock.clone()));
    let factor_url = serve(factors.clone().router()).await;

    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(&dir.path().join("registry.db")).unwrap());
    let profiles: Vec<NamedProfile> = spec
        .profiles
        .iter()
        .map(|(name, g)| NamedProfile {
            name: name.clone(),
            rapl_domains: g.rapl_domains.clone(),
            ipmi_includes_gpu: g.ipmi_includes_gpu,
            network_fraction: g.network_fraction,
            storage_fraction: g.storage_fraction,
            instances: Some(format!(r"{name}-\d+")),
            naming: None,
        })
        .collect();
    let service = FactorService::new(
        Some(RealtimeProvider::new(&factor_url, Duration::from_secs(5)).unwrap()),
        None,
        Duration::from_secs(900),
        dyn_clock.clone(),
    );
    let registry = Registry::new(
        &spec.cluster_id,
        store.clone(),
        Arc::new(HttpTsdb::new(&tsdb_url, Duration::from_secs(10)).unwrap()),
        Box::new(TraceSource {
            trace: trace.clone(),
            clock: dyn_clock.clone(),
        }),
        ProfileMatcher::new(&profiles).unwrap(),
        dyn_clock.clone(),
    )
    .with_factors(Arc::new(service), &spec.region)
    .with_options(CycleOptions {
        cutoff_s: spec.short_job_cutoff_s,
        settle_ms: 0,
        initial_lookback_ms: 3_600_000,
    });

    let driver = ScrapeDriver::new(
        cluster.targets().to_vec(),
        Sink::Local(db.clone()),
        ScrapeOptions::default(),
    );
    let per_hour = (3_600_000 / trace.interval_ms) as usize;
    let mut deletions = Vec::new();
    for k in 0..=trace.last_instant {
        clock.set(trace.time_of(k));
        let scrape = driver.run_cycle(trace.time_of(k)).await;
        assert!(scrape.down().is_empty());
        if k % per_hour == 0 {
            let report = registry.run_cycle().await.unwrap();
            assert!(report.unmatched_instances.is_empty());
            assert_eq!(report.skipped_instants, 0, "cycle at instant {k}");
            assert_eq!(report.purge_failures, 0);
            deletions.extend(report.deletions);
        }
    }
    assert_eq!(factors.hits(), (trace.last_instant / per_hour + 1) as u64);

    assert_eq!(store.unit_count().unwrap(), trace.jobs.len());
    assert_eq!(deletions.len(), trace.short_job_count());
    let mut per_user: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (i, job) in trace.jobs.iter().enumerate() {
        let (kwh, grams) = oracle(&trace, i);
        let (m, is_final) = store.aggregate(&spec.cluster_id, &job.unit.uuid).unwrap().unwrap();
        assert_eq!(is_final, job.unit.ended_at_ms.is_some(), "{}", job.unit.uuid);
        assert!(
            close(m.total_energy_kwh, kwh),
            "{}: {} vs {kwh}",
            job.unit.uuid,
            m.total_energy_kwh
        );
        assert!(
            close(m.total_emissions_grams, grams),
            "{}: {} vs {grams}",
            job.unit.uuid,
            m.total_emissions_grams
        );
        let stored = store.unit(&spec.cluster_id, &job.unit.uuid).unwrap().unwrap();
        assert_eq!(stored.purged, job.short);
        let e = per_user.entry(job.unit.user.clone()).or_default();
        e.0 += kwh;
        e.1 += grams;
    }
    for (user, (kwh, grams)) in per_user {
        let parts = store.scope_aggregates(Scope::User, &user, 0, i64::MAX).unwrap();
        let total = wattline_registry::combine(Scope::User, &user, 0, i64::MAX, &parts);
        assert!(
            close(total.total_energy_kwh, kwh),
            "{user}: {} vs {kwh}",
            total.total_energy_kwh
        );
        assert!(close(total.total_emissions_grams, grams), "{user}");
    }
    // Short jobs' series are gone from the TSDB; long jobs' remain.
    for job in &trace.jobs {
        let sel = wattline_core::selector::parse_selector(&format!(r#"{{workload_id="{}"}}"#, job.unit.uuid)).unwrap();
        assert_eq!(db.select(&sel, 0, i64::MAX).is_empty(), job.short, "{}", job.unit.uuid);
    }
}
