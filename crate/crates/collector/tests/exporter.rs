use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use wattline_collector::server::router;
use wattline_collector::{CollectorSet, Exporter, FsSource, MemFs};
use wattline_core::auth::{encode_basic_header, BasicCredential, PasswordHash};
use wattline_core::exposition::{parse_exposition, render_exposition};
use wattline_core::ManualClock;

fn fixture(jobs: usize) -> MemFs {
    let mut fs = MemFs::new();
    let base = "sys/fs/cgroup/system.slice/slurmstepd.scope";
    for j in 0..jobs {
        fs.insert(
            &format!("{base}/job_{j}/cpu.stat"),
            format!("usage_usec {}\nuser_usec 0\n", j * 1_000_000),
        )
        .insert(&format!("{base}/job_{j}/memory.current"), format!("{}\n", j * 4096));
    }
    for s in 0..2 {
        let p = format!("sys/class/powercap/intel-rapl:{s}");
        fs.insert(&format!("{p}/name"), format!("package-{s}"))
            .insert(&format!("{p}/energy_uj"), "123456")
            .insert(&format!("{p}/max_energy_range_uj"), "262143328850")
            .insert(&format!("{p}/intel-rapl:{s}:0/name"), "dram")
            .insert(&format!("{p}/intel-rapl:{s}:0/energy_uj"), "654321")
            .insert(&format!("{p}/intel-rapl:{s}:0/max_energy_range_uj"), "65712999613");
    }
    fs.insert("proc/stat", "cpu  1000 0 500 9000 10 0 0 0 0 0\n")
        .insert("proc/meminfo", "MemTotal: 1048576 kB\nMemAvailable: 524288 kB\n")
        .insert(
            "ipmi/dcmi_power_reading.txt",
            "    Instantaneous power reading:                   412 Watts\n",
        )
        .insert("gpu/map", "3 0 GPU-aaaa\n")
        .insert("gpu/devices", "0 GPU-aaaa 180 0.5\n");
    fs
}

fn exporter(fs: MemFs, set: CollectorSet) -> Exporter {
    let fs: Arc<dyn FsSource> = Arc::new(fs);
    Exporter::new(fs, set, Arc::new(ManualClock::new(0)))
}

fn family_names(e: &Exporter) -> BTreeSet<String> {
    e.collect().into_iter().map(|f| f.name).collect()
}

#[test]
fn all_collectors_round_trip() {
    let e = exporter(fixture(5), CollectorSet::default());
    let text = e.render();
    let parsed = parse_exposition(&text).unwrap();
    assert_eq!(render_exposition(&parsed).unwrap(), text);
    for name in [
        "wattline_cpu_seconds_total",
        "wattline_memory_bytes",
        "wattline_rapl_energy_microjoules_total",
        "wattline_node_power_watts",
        "wattline_workload_gpu",
        "wattline_node_cpu_seconds_total",
        "wattline_node_memory_bytes",
        "wattline_cgroup_collector_success",
    ] {
        assert!(parsed.iter().any(|f| f.name == name), "missing {name}");
    }
    assert!(text.contains("wattline_node_power_watts{source=\"ipmi_dcmi\"} 412\n"));
    assert!(text.contains("wattline_cpu_seconds_total{workload_id=\"3\"} 3\n"));
    assert!(text.contains("wattline_node_cpu_seconds_total 15\n"));
}

#[test]
fn disabling_a_collector_removes_only_its_families() {
    let all = family_names(&exporter(fixture(3), CollectorSet::default()));
    let toggles: [fn(&mut CollectorSet); 4] = [
        |s| s.cgroup = false,
        |s| s.rapl = false,
        |s| s.ipmi = false,
        |s| s.gpumap = false,
    ];
    let mut removed_total = 0;
    for toggle in toggles {
        let mut set = CollectorSet::default();
        toggle(&mut set);
        let some = family_names(&exporter(fixture(3), set));
        assert!(some.is_subset(&all));
        let removed: Vec<_> = all.difference(&some).collect();
        assert!(!removed.is_empty());
        removed_total += removed.len();
    }
    assert_eq!(
        removed_total,
        all.len(),
        "every family belongs to exactly one collector"
    );
}

#[test]
fn failures_degrade_instead_of_aborting() {
    let mut fs = MemFs::new();
    fs.insert("ipmi/dcmi_power_reading.txt", "garbage");
    let text = exporter(fs, CollectorSet::default()).render();
    assert!(text.contains("wattline_cgroup_collector_success 0\n"));
    assert!(text.contains("wattline_ipmi_available 0\n"));
    assert!(text.contains("wattline_rapl_available 0\n"));
    assert!(parse_exposition(&text).is_ok());
}

#[test]
fn five_hundred_workloads_render_quickly() {
    let e = exporter(fixture(500), CollectorSet::default());
    let _ = e.render();
    let start = Instant::now();
    let text = e.render();
    let elapsed = start.elapsed();
    assert_eq!(text.matches("wattline_cpu_seconds_total{").count(), 500);
    assert!(elapsed.as_millis() < 50, "{elapsed:?}");
}

proptest! {
    #[test]
    fn cpu_time_never_decreases(increments in prop::collection::vec(0u64..5_000_000, 1..20)) {
        let mut fs = fixture(0);
        let path = "sys/fs/cgroup/job_1/cpu.stat";
        fs.insert("sys/fs/cgroup/job_1/memory.current", "1");
        let mut usec = 0;
        let mut last = -1.0;
        for inc in increments {
            usec += inc;
            fs.insert(path, format!("usage_usec {usec}\n"));
            let r = wattline_collector::collect_cgroup_usage(&fs, Default::default(), 0).unwrap();
            let now = r.samples[0].cpu_time_seconds;
            prop_assert!(now >= last);
            last = now;
        }
    }
}

#[tokio::test]
async fn http_metrics_with_basic_auth() {
    let users = vec![BasicCredential {
        username: "prom".into(),
        password_hash: PasswordHash::new("pw", b"salt"),
    }];
    let set = CollectorSet {
        ipmi: false,
        gpumap: false,
        ..CollectorSet::default()
    };
    let app = router(Arc::new(exporter(fixture(2), set)), users);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let client = reqwest::Client::new();

    let ok = client
        .get(format!("http://{addr}/metrics"))
        .header("Authorization", encode_basic_header("prom", "pw"))
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status(), 200);
    assert!(ok.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/plain; version=0.0.4"));
    let body = ok.text().await.unwrap();
    assert!(body.contains("wattline_cpu_seconds_total"));
    assert!(body.contains("wattline_rapl_energy_microjoules_total"));
    assert!(!body.contains("wattline_node_power_watts"));

    let denied = client
        .get(format!("http://{addr}/metrics"))
        .header("Authorization", encode_basic_header("prom", "wrong"))
        .send()
        .await
        .unwrap();
    assert_eq!(denied.status(), 401);
    assert!(denied.text().await.unwrap().is_empty());

    let health = client.get(format!("http://{addr}/health")).send().await.unwrap();
    assert_eq!(health.text().await.unwrap(), "ok");
}
