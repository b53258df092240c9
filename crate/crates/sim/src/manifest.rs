//! Line-delimited JSON manifest: one record per line, tagged by `type`.
//!
//! Per-instant arrays are aligned to the cluster's scrape grid. Node arrays
//! start at instant 0; job arrays cover instants `start_instant + 1 ..=
//! end_instant` (the instants at which the job is counted).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wattline_core::{Profile, RaplDomain, WorkloadUnit};

use crate::spec::ClusterSpec;
use crate::trace::Trace;
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Cluster(ClusterRecord),
    Factor(FactorRecord),
    Node(NodeRecord),
    Job(JobRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub spec: ClusterSpec,
    pub start_ms: i64,
    pub interval_ms: i64,
    pub last_instant: usize,
    pub job_count: usize,
    pub short_job_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub region: String,
    /// Start of the hour during which the factor is in force.
    pub timestamp_ms: i64,
    pub grams_per_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub instance: String,
    pub group: String,
    pub profile: Profile,
    pub ipmi_watts: Vec<u64>,
    pub ipmi_true_watts: Vec<f64>,
    pub idle_floor_watts: Vec<f64>,
    pub unattributed_watts: Vec<f64>,
    /// RAPL power over the interval ending at each instant; 0 at instant 0.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rapl_cpu_package_watts: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rapl_dram_watts: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub unit: WorkloadUnit,
    pub instance: String,
    pub start_instant: usize,
    pub end_instant: usize,
    pub short: bool,
    pub cpu_rate: Vec<f64>,
    pub memory_bytes: Vec<u64>,
    pub true_watts: Vec<f64>,
    pub attributed_watts: Vec<f64>,
    pub cpu_watts: Vec<f64>,
    pub dram_watts: Vec<f64>,
    pub network_watts: Vec<f64>,
}

impl JobRecord {
    pub fn timestamps(&self, start_ms: i64, interval_ms: i64) -> impl Iterator<Item = i64> {
        (self.start_instant + 1..=self.end_instant).map(move |k| start_ms + k as i64 * interval_ms)
    }
}

fn rapl_watts(series: &[Vec<u64>], dt: f64) -> Vec<f64> {
    let len = series.first().map_or(0, Vec::len);
    (0..len)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                series.iter().map(|s| (s[k] - s[k - 1]) as f64).sum::<f64>() / 1e6 / dt
            }
        })
        .collect()
}

/// Every record of the trace, in a fixed order.
pub fn records(trace: &Trace) -> Vec<Record> {
    let dt = trace.interval_ms as f64 / 1000.0;
    let mut out = vec![Record::Cluster(ClusterRecord {
        spec: trace.spec.clone(),
        start_ms: trace.start_ms,
        interval_ms: trace.interval_ms,
        last_instant: trace.last_instant,
        job_count: trace.jobs.len(),
        short_job_count: trace.short_job_count(),
    })];
    for (h, f) in trace.hourly_factors.iter().enumerate() {
        out.push(Record::Factor(FactorRecord {
            region: trace.spec.region.clone(),
            timestamp_ms: trace.start_ms + h as i64 * 3_600_000,
            grams_per_kwh: *f,
        }));
    }
    for node in &trace.nodes {
        out.push(Record::Node(NodeRecord {
            instance: node.instance.clone(),
            group: node.group.clone(),
            profile: node.profile.clone(),
            ipmi_watts: node.ipmi_watts.clone(),
            ipmi_true_watts: node.ipmi_true_watts.clone(),
            idle_floor_watts: node.idle_floor_watts.clone(),
            unattributed_watts: node.unattributed_watts.clone(),
            rapl_cpu_package_watts: node
                .has(RaplDomain::CpuPackage)
                .then(|| rapl_watts(&node.package_uj, dt)),
            rapl_dram_watts: node.has(RaplDomain::Dram).then(|| rapl_watts(&node.dram_uj, dt)),
        }));
    }
    for job in &trace.jobs {
        let ks = job.start + 1..=job.end;
        out.push(Record::Job(JobRecord {
            unit: job.unit.clone(),
            instance: trace.nodes[job.node].instance.clone(),
            start_instant: job.start,
            end_instant: job.end,
            short: job.short,
            cpu_rate: ks.clone().map(|k| job.cpu_usec_in(k) as f64 / 1e6 / dt).collect(),
            memory_bytes: ks.map(|k| job.memory_at(k)).collect(),
            true_watts: job.true_watts.clone(),
            attributed_watts: job.attributed.iter().map(|a| a.watts).collect(),
            cpu_watts: job.attributed.iter().map(|a| a.cpu_watts).collect(),
            dram_watts: job.attributed.iter().map(|a| a.dram_watts).collect(),
            network_watts: job.attributed.iter().map(|a| a.network_watts).collect(),
        }));
    }
    out
}

pub fn write_manifest(trace: &Trace, path: &Path) -> Result<(), SimError> {
    let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in records(trace) {
        serde_json::to_writer(&mut w, &record).map_err(|e| SimError::Manifest(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| SimError::io(path, e))?;
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>, SimError> {
    let file = std::fs::File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SimError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| SimError::Manifest(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}
