use std::collections::HashSet;
use std::sync::Arc;

use wattline_core::selector::parse_selector;
use wattline_core::{Clock, ManualClock};
use wattline_sim::{generate, ClusterSpec, MockTsdb, ScrapeDriver, ScrapeOptions, SimCluster, Sink, Trace};

const CYCLES: usize = 60;

fn trace() -> Arc<Trace> {
    let spec = ClusterSpec::parse(
        r#"
seed = 11
duration_s = 3600
node_count = 20
job_rate_per_day = 4800
mean_job_duration_s = 300.0
short_job_fraction = 0.3
user_count = 5
project_count = 2

[profiles.intel]
nodes = 12
rapl_domains = ["cpu_package", "dram"]

[profiles.amd]
nodes = 4
rapl_domains = ["cpu_package"]

[profiles.gpu]
nodes = 4
rapl_domains = ["cpu_package"]
ipmi_includes_gpu = true
gpus_per_node = 4
"#,
    )
    .unwrap();
    Arc::new(generate(&spec).unwrap())
}

struct Run {
    trace: Arc<Trace>,
    db: Arc<MockTsdb>,
    reports: Vec<wattline_sim::ScrapeReport>,
}

async fn run(down: Option<(usize, usize)>) -> Run {
    let trace = trace();
    let clock = Arc::new(ManualClock::new(trace.start_ms));
    let cluster = SimCluster::start(trace.clone(), clock.clone() as Arc<dyn Clock>, Vec::new())
        .await
        .unwrap();
    let db = Arc::new(MockTsdb::new());
    let options = ScrapeOptions {
        verify_round_trip: true,
        ..ScrapeOptions::default()
    };
    let driver = ScrapeDriver::new(cluster.targets().to_vec(), Sink::Local(db.clone()), options);
    let mut reports = Vec::new();
    for k in 0..CYCLES {
        clock.set(trace.time_of(k));
        match down {
            Some((node, at)) if at == k => cluster.stop(node),
            Some((node, at)) if at + 1 == k => cluster.resume(node),
            _ => {}
        }
        reports.push(driver.run_cycle(clock.now_ms()).await);
    }
    Run { trace, db, reports }
}

fn points_for(db: &MockTsdb, instance: &str, start: i64, end: i64) -> Vec<(String, usize, Option<String>)> {
    let sel = parse_selector(&format!(r#"{{instance="{instance}"}}"#)).unwrap();
    db.select(&sel, start, end)
        .into_iter()
        .map(|s| {
            (
                s.metric_name.clone(),
                s.points.len(),
                s.labels.get("workload_id").map(str::to_string),
            )
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn every_series_gets_one_point_per_cycle() {
    let Run { trace, db, reports } = run(None).await;
    let (start, end) = (trace.time_of(0), trace.time_of(CYCLES - 1));
    for r in &reports {
        assert!(r.down().is_empty(), "{:?}", r.down());
        assert_eq!(r.parse_errors(), 0);
        assert_eq!(r.round_trip_mismatches(), 0);
    }
    let mut job_series = 0;
    for (n, node) in trace.nodes.iter().enumerate() {
        let series = points_for(&db, &node.instance, start, end);
        assert!(!series.is_empty());
        for (name, points, workload) in series {
            match workload {
                None => assert_eq!(points, CYCLES, "{} {name}", node.instance),
                Some(id) => {
                    let job = trace.nodes[n]
                        .jobs
                        .iter()
                        .map(|&j| &trace.jobs[j])
                        .find(|j| j.unit.uuid == id)
                        .unwrap();
                    let present = (0..CYCLES).filter(|&k| job.present_at(k)).count();
                    assert_eq!(points, present, "{} {name} job {id}", node.instance);
                    job_series += 1;
                }
            }
        }
    }
    assert!(job_series > 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn every_exposed_sample_is_stored_once() {
    let Run { db, reports, .. } = run(None).await;
    let samples: usize = reports.iter().map(|r| r.samples()).sum();
    let appended: usize = reports.iter().map(|r| r.appended()).sum();
    assert!(samples > 0);
    assert_eq!(appended, samples);
    assert_eq!(db.point_count(), samples);
    assert_eq!(db.appended() as usize, samples);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn a_down_exporter_misses_only_its_own_cycle() {
    let Run { trace, db, reports } = run(Some((3, 17))).await;
    let down = &trace.nodes[3].instance;
    for (k, r) in reports.iter().enumerate() {
        if k == 17 {
            assert_eq!(r.down(), vec![down.as_str()]);
        } else {
            assert!(r.down().is_empty(), "cycle {k}: {:?}", r.down());
        }
    }
    let (start, end) = (trace.time_of(0), trace.time_of(CYCLES - 1));
    let name_sel = parse_selector(&format!(r#"wattline_node_power_watts{{instance="{down}"}}"#)).unwrap();
    let power = db.select(&name_sel, start, end);
    assert_eq!(power.len(), 1);
    assert_eq!(power[0].points.len(), CYCLES - 1);
    assert!(power[0].points.iter().all(|&(t, _)| t != trace.time_of(17)));

    let others: HashSet<_> = trace
        .nodes
        .iter()
        .map(|n| n.instance.as_str())
        .filter(|i| i != down)
        .collect();
    for instance in others {
        for (name, points, workload) in points_for(&db, instance, start, end) {
            if workload.is_none() {
                assert_eq!(points, CYCLES, "{instance} {name}");
            }
        }
    }
}
