//! Assembles collector outputs into metric families.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wattline_core::exposition::{render_exposition, LabelSet, MetricFamily};
use wattline_core::{Clock, SystemClock};

use crate::cgroup::{collect_cgroup_usage, read_node_totals, Layout};
use crate::fs::{FsSource, OsFs};
use crate::gpu::collect_gpu_map;
use crate::ipmi::{CommandSource, FileSource, IpmiReader, NodePowerReading, DEFAULT_MIN_INTERVAL_MS};
use crate::rapl::read_energy_counters;

pub const DEFAULT_LISTEN_ADDRESS: &str = "0.0.0.0:9010";
pub const DEFAULT_IPMI_REPLAY: &str = "ipmi/dcmi_power_reading.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectorSet {
    pub cgroup: bool,
    pub rapl: bool,
    pub ipmi: bool,
    pub gpumap: bool,
}

impl Default for CollectorSet {
    fn default() -> Self {
        Self {
            cgroup: true,
            rapl: true,
            ipmi: true,
            gpumap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpmiConfig {
    /// Command and arguments; when unset the replay file is read instead.
    #[serde(default)]
    pub command: Option<Vec<String>>,
    #[serde(default = "default_replay")]
    pub replay_file: String,
    #[serde(default = "default_min_interval")]
    pub min_interval_seconds: u64,
}

fn default_replay() -> String {
    DEFAULT_IPMI_REPLAY.to_string()
}

fn default_min_interval() -> u64 {
    (DEFAULT_MIN_INTERVAL_MS / 1000) as u64
}

impl Default for IpmiConfig {
    fn default() -> Self {
        Self {
            command: None,
            replay_file: default_replay(),
            min_interval_seconds: default_min_interval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExporterConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default)]
    pub collectors: CollectorSet,
    #[serde(default = "default_root")]
    pub fs_root: PathBuf,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub ipmi: IpmiConfig,
}

fn default_listen() -> String {
    DEFAULT_LISTEN_ADDRESS.to_string()
}

fn default_root() -> PathBuf {
    PathBuf::from("/")
}

impl Default for ExporterConfig {
    fn default() -> Self {
        Self {
            listen_address: default_listen(),
            collectors: CollectorSet::default(),
            fs_root: default_root(),
            layout: Layout::default(),
            ipmi: IpmiConfig::default(),
        }
    }
}

impl ExporterConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.listen_address
            .parse::<std::net::SocketAddr>()
            .map_err(|e| format!("exporter.listen_address `{}`: {e}", self.listen_address))?;
        if let Some(cmd) = &self.ipmi.command {
            if cmd.is_empty() || cmd[0].is_empty() {
                return Err("exporter.ipmi.command must name a program".into());
            }
        }
        Ok(())
    }
}

pub struct Exporter {
    fs: Arc<dyn FsSource>,
    collectors: CollectorSet,
    layout: Layout,
    ipmi: Option<IpmiReader>,
    clock: Arc<dyn Clock>,
}

impl Exporter {
    /// An exporter with the IPMI source replaying `ipmi/dcmi_power_reading.txt`
    /// from `fs`.
    pub fn new(fs: Arc<dyn FsSource>, collectors: CollectorSet, clock: Arc<dyn Clock>) -> Self {
        let ipmi = collectors.ipmi.then(|| {
            IpmiReader::new(
                Box::new(FileSource {
                    fs: fs.clone(),
                    path: DEFAULT_IPMI_REPLAY.to_string(),
                }),
                clock.clone(),
                DEFAULT_MIN_INTERVAL_MS,
            )
        });
        Self {
            fs,
            collectors,
            layout: Layout::default(),
            ipmi,
            clock,
        }
    }

    pub fn from_config(cfg: &ExporterConfig) -> Self {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let fs: Arc<dyn FsSource> = Arc::new(OsFs::new(&cfg.fs_root));
        let ipmi = cfg.collectors.ipmi.then(|| {
            let source: Box<dyn crate::ipmi::PowerSource> = match &cfg.ipmi.command {
                Some(cmd) => Box::new(CommandSource {
                    program: cmd[0].clone(),
                    args: cmd[1..].to_vec(),
                }),
                None => Box::new(FileSource {
                    fs: fs.clone(),
                    path: cfg.ipmi.replay_file.clone(),
                }),
            };
            IpmiReader::new(source, clock.clone(), cfg.ipmi.min_interval_seconds as i64 * 1000)
        });
        Self {
            fs,
            collectors: cfg.collectors,
            layout: cfg.layout,
            ipmi,
            clock,
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_ipmi(mut self, reader: IpmiReader) -> Self {
        self.ipmi = Some(reader);
        self
    }

    pub fn collectors(&self) -> CollectorSet {
        self.collectors
    }

    pub fn ipmi(&self) -> Option<&IpmiReader> {
        self.ipmi.as_ref()
    }

    /// One scrape: every enabled collector is read once.
    pub fn collect(&self) -> Vec<MetricFamily> {
        let now = self.clock.now_ms();
        let mut out = Vec::new();
        if self.collectors.cgroup {
            self.collect_cgroup(now, &mut out);
        }
        if self.collectors.rapl {
            self.collect_rapl(now, &mut out);
        }
        if self.collectors.ipmi {
            self.collect_ipmi(&mut out);
        }
        if self.collectors.gpumap {
            self.collect_gpu(&mut out);
        }
        out
    }

    pub fn render(&self) -> String {
        render_exposition(&self.collect()).unwrap_or_else(|e| {
            // Collectors only produce valid names and finite values.
            tracing::error!(error = %e, "exposition rendering failed");
            String::new()
        })
    }

    fn collect_cgroup(&self, now: i64, out: &mut Vec<MetricFamily>) {
        let mut cpu = MetricFamily::counter(
            "wattline_cpu_seconds_total",
            "CPU time consumed by the workload cgroup.",
        );
        let mut mem = MetricFamily::gauge(
            "wattline_memory_bytes",
            "Memory currently charged to the workload cgroup.",
        );
        let mut node_cpu = MetricFamily::counter(
            "wattline_node_cpu_seconds_total",
            "Busy CPU time of the node summed over cores.",
        );
        let mut node_mem = MetricFamily::gauge("wattline_node_memory_bytes", "Memory in use on the node.");
        let mut errors = MetricFamily::gauge(
            "wattline_cgroup_read_errors",
            "Workload cgroups skipped in this scrape.",
        );
        let mut success = 1.0;
        match collect_cgroup_usage(self.fs.as_ref(), self.layout, now) {
            Ok(report) => {
                for s in &report.samples {
                    let labels = workload_labels(&s.workload_id);
                    cpu.push(labels.clone(), s.cpu_time_seconds);
                    mem.push(labels, s.memory_bytes);
                }
                errors.push(LabelSet::empty(), report.skipped as f64);
            }
            Err(e) => {
                tracing::warn!(error = %e, "cgroup collector failed");
                success = 0.0;
            }
        }
        match read_node_totals(self.fs.as_ref()) {
            Ok(t) => {
                node_cpu.push(LabelSet::empty(), t.cpu_seconds);
                node_mem.push(LabelSet::empty(), t.memory_bytes);
            }
            Err(e) => {
                tracing::warn!(error = %e, "node totals unavailable");
                success = 0.0;
            }
        }
        out.extend([cpu, mem, node_cpu, node_mem, errors]);
        out.push(success_family("cgroup", success));
    }

    fn collect_rapl(&self, now: i64, out: &mut Vec<MetricFamily>) {
        let report = read_energy_counters(self.fs.as_ref(), now);
        let mut energy = MetricFamily::counter(
            "wattline_rapl_energy_microjoules_total",
            "RAPL energy counter of the domain; wraps at the max range.",
        );
        let mut range = MetricFamily::gauge(
            "wattline_rapl_max_energy_range_microjoules",
            "Value at which the RAPL energy counter wraps.",
        );
        for c in &report.counters {
            let labels = LabelSet::new([
                ("domain", c.domain.as_str().to_string()),
                ("socket", c.socket.to_string()),
            ])
            .expect("static label names");
            energy.push(labels.clone(), c.energy_uj);
            range.push(labels, c.max_range_uj);
        }
        let mut available = MetricFamily::gauge("wattline_rapl_available", "Whether a powercap tree was found.");
        available.push(LabelSet::empty(), if report.available { 1.0 } else { 0.0 });
        out.extend([energy, range, available]);
        out.push(success_family("rapl", 1.0));
    }

    fn collect_ipmi(&self, out: &mut Vec<MetricFamily>) {
        let reading = self.ipmi.as_ref().and_then(IpmiReader::read);
        let mut power = MetricFamily::gauge(
            "wattline_node_power_watts",
            "Whole-node power draw reported over IPMI-DCMI.",
        );
        let ok = if let Some(r) = reading {
            power.push(
                LabelSet::new([("source", NodePowerReading::SOURCE)]).expect("static label names"),
                r.watts,
            );
            1.0
        } else {
            0.0
        };
        let mut available =
            MetricFamily::gauge("wattline_ipmi_available", "Whether the last IPMI-DCMI read succeeded.");
        available.push(LabelSet::empty(), ok);
        out.extend([power, available]);
        out.push(success_family("ipmi", ok));
    }

    fn collect_gpu(&self, out: &mut Vec<MetricFamily>) {
        let report = collect_gpu_map(self.fs.as_ref());
        let mut map = MetricFamily::gauge("wattline_workload_gpu", "GPU assigned to a workload.");
        for e in &report.entries {
            let labels = LabelSet::new([
                ("workload_id", e.workload_id.clone()),
                ("gpu_index", e.gpu_index.to_string()),
                ("gpu_uuid", e.gpu_uuid.clone()),
            ])
            .expect("static label names");
            map.push(labels, 1.0);
        }
        let mut power = MetricFamily::gauge("wattline_gpu_power_watts", "Power draw of the GPU device.");
        let mut util = MetricFamily::gauge(
            "wattline_gpu_utilization_ratio",
            "Utilization of the GPU device in [0, 1].",
        );
        for d in &report.devices {
            let labels = LabelSet::new([("gpu_index", d.gpu_index.to_string()), ("gpu_uuid", d.gpu_uuid.clone())])
                .expect("static label names");
            power.push(labels.clone(), d.power_watts);
            util.push(labels, d.utilization);
        }
        let mut errors = MetricFamily::gauge("wattline_gpumap_read_errors", "GPU rows dropped in this scrape.");
        errors.push(LabelSet::empty(), report.skipped as f64);
        out.extend([map, power, util, errors]);
        out.push(success_family("gpumap", 1.0));
    }
}

fn workload_labels(id: &str) -> LabelSet {
    LabelSet::new([("workload_id", id)]).expect("static label names")
}

fn success_family(name: &str, value: f64) -> MetricFamily {
    let mut f = MetricFamily::gauge(
        &format!("wattline_{name}_collector_success"),
        "Whether the collector succeeded in this scrape.",
    );
    f.push(LabelSet::empty(), value);
    f
}
