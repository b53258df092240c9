//! Builds node snapshots from one instance's raw series and splits them.
//!
//! Instant `b` uses rates over the interval `(a, b]` between consecutive
//! node CPU samples, plus IPMI, memory and GPU readings taken at `b`. A
//! workload counts at `b` only when its CPU counter has samples at both
//! `a` and `b`.

use std::collections::BTreeMap;

use regex::Regex;
use wattline_core::counter::wrapping_delta;
use wattline_core::rules::{MetricRole, NamedProfile};
use wattline_core::{attribute_power, NodeAttribution, Profile, RaplDomain, Snapshot, Usage};

use crate::tsdb::RangeSeries;
use crate::RegistryError;

const RAPL_RANGE: &str = "wattline_rapl_max_energy_range_microjoules";

/// Profiles matched against the `instance` label, first match wins.
#[derive(Debug, Clone)]
pub struct ProfileMatcher {
    entries: Vec<(Regex, NamedProfile)>,
}

impl ProfileMatcher {
    /// A profile without an `instances` pattern matches every instance.
    pub fn new(profiles: &[NamedProfile]) -> Result<Self, RegistryError> {
        let entries = profiles
            .iter()
            .map(|p| {
                let pattern = p.instances.as_deref().unwrap_or(".*");
                Regex::new(&format!("^(?:{pattern})$"))
                    .map(|r| (r, p.clone()))
                    .map_err(|e| RegistryError::Config(format!("profile {}: {e}", p.name)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn profile_for(&self, instance: &str) -> Option<&NamedProfile> {
        self.entries.iter().find(|(r, _)| r.is_match(instance)).map(|(_, p)| p)
    }
}

/// Result of attributing a run of instants on one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeRun {
    pub attributions: Vec<NodeAttribution>,
    /// Instants skipped for missing readings or rejected snapshots.
    pub skipped: Vec<(i64, String)>,
    /// Last instant examined; the next run starts after it.
    pub watermark: Option<i64>,
}

struct Indexed<'a> {
    by_name: BTreeMap<&'a str, Vec<&'a RangeSeries>>,
}

impl<'a> Indexed<'a> {
    fn new(series: &'a [RangeSeries]) -> Self {
        let mut by_name: BTreeMap<&str, Vec<&RangeSeries>> = BTreeMap::new();
        for s in series {
            by_name.entry(s.metric_name()).or_default().push(s);
        }
        Self { by_name }
    }

    fn get(&self, role: MetricRole) -> &[&'a RangeSeries] {
        self.named(role.default_family())
    }

    fn named(&self, name: &str) -> &[&'a RangeSeries] {
        self.by_name.get(name).map_or(&[], Vec::as_slice)
    }
}

fn rapl_watts(ix: &Indexed<'_>, domain: RaplDomain, a: i64, b: i64, dt: f64) -> Result<f64, String> {
    let ranges = ix.named(RAPL_RANGE);
    let mut joules_uj = 0.0;
    let mut found = false;
    for s in ix.get(MetricRole::RaplEnergy) {
        if s.label("domain") != Some(domain.as_str()) {
            continue;
        }
        let (Some(prev), Some(curr)) = (s.value_at(a), s.value_at(b)) else {
            return Err(format!(
                "rapl {} socket {:?} has a gap",
                domain.as_str(),
                s.label("socket")
            ));
        };
        let range = ranges
            .iter()
            .find(|r| r.label("domain") == s.label("domain") && r.label("socket") == s.label("socket"))
            .and_then(|r| r.value_at(b))
            .unwrap_or(f64::MAX);
        joules_uj += wrapping_delta(prev, curr, range);
        found = true;
    }
    if found {
        Ok(joules_uj / 1e6 / dt)
    } else {
        Err(format!("no rapl {} counters", domain.as_str()))
    }
}

fn snapshot(ix: &Indexed<'_>, profile: &Profile, a: i64, b: i64) -> Result<Snapshot, String> {
    let dt = (b - a) as f64 / 1000.0;
    let node_cpu = ix.get(MetricRole::NodeCpu).first().ok_or("no node cpu series")?;
    let (Some(cpu_a), Some(cpu_b)) = (node_cpu.value_at(a), node_cpu.value_at(b)) else {
        return Err("node cpu gap".into());
    };
    let ipmi: f64 = {
        let readings: Vec<f64> = ix
            .get(MetricRole::NodePower)
            .iter()
            .filter_map(|s| s.value_at(b))
            .collect();
        if readings.is_empty() {
            return Err("no ipmi reading".into());
        }
        readings.iter().sum()
    };
    let node_memory = ix
        .get(MetricRole::NodeMemory)
        .iter()
        .find_map(|s| s.value_at(b))
        .ok_or("no node memory reading")?;
    let gpu_watts: f64 = ix.get(MetricRole::GpuPower).iter().filter_map(|s| s.value_at(b)).sum();
    let rapl_cpu_watts = if profile.has(RaplDomain::CpuPackage) {
        Some(rapl_watts(ix, RaplDomain::CpuPackage, a, b, dt)?)
    } else {
        None
    };
    let rapl_dram_watts = if profile.has(RaplDomain::Dram) {
        Some(rapl_watts(ix, RaplDomain::Dram, a, b, dt)?)
    } else {
        None
    };

    let memory: BTreeMap<&str, f64> = ix
        .get(MetricRole::WorkloadMemory)
        .iter()
        .filter_map(|s| Some((s.label("workload_id")?, s.value_at(b)?)))
        .collect();
    let mut workloads = Vec::new();
    for s in ix.get(MetricRole::WorkloadCpu) {
        let Some(id) = s.label("workload_id") else { continue };
        let (Some(prev), Some(curr)) = (s.value_at(a), s.value_at(b)) else {
            continue;
        };
        let rate = (curr - prev).max(0.0) / dt;
        workloads.push(Usage::new(id, rate, memory.get(id).copied().unwrap_or(0.0)));
    }
    workloads.sort_by(|x, y| x.workload_id.cmp(&y.workload_id));

    Ok(Snapshot {
        timestamp_ms: b,
        ipmi_watts: ipmi,
        rapl_cpu_watts,
        rapl_dram_watts,
        gpu_watts,
        node_cpu_rate: ((cpu_b - cpu_a) / dt).max(0.0),
        node_memory_bytes: node_memory,
        workloads,
    })
}

/// Attributes every instant after `after_ms` covered by `series`, which
/// must hold all series of one instance. Instants are the node CPU sample
/// times; the sample at or before `after_ms` only serves as the first
/// interval's start.
pub fn attribute_node(series: &[RangeSeries], profile: &Profile, after_ms: Option<i64>) -> NodeRun {
    let ix = Indexed::new(series);
    let mut run = NodeRun::default();
    let Some(node_cpu) = ix.get(MetricRole::NodeCpu).first() else {
        return run;
    };
    let times: Vec<i64> = node_cpu.points.iter().map(|p| p.0).collect();
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1]);
        if after_ms.is_some_and(|t| b <= t) {
            continue;
        }
        run.watermark = Some(b);
        match snapshot(&ix, profile, a, b).and_then(|s| attribute_power(&s, profile).map_err(|e| e.to_string())) {
            Ok(att) => run.attributions.push(att),
            Err(e) => run.skipped.push((b, e)),
        }
    }
    if run.watermark.is_none() {
        run.watermark = times.last().copied().filter(|&t| after_ms.is_none_or(|w| t > w));
    }
    run
}
