//! The unified workload schema and the accounting file adapter.
//!
//! Accounting lines are pipe separated:
//! `uuid|user|project|start|end|alloc_cpus|alloc_mem_bytes|gpu_indices`
//! with RFC 3339 timestamps, an empty `end` for running units and a
//! comma separated (possibly empty) GPU index list.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceManager {
    Slurm,
    Libvirt,
    Kubelet,
}

impl ResourceManager {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResourceManager::Slurm => "slurm",
            ResourceManager::Libvirt => "libvirt",
            ResourceManager::Kubelet => "kubelet",
        }
    }
}

impl FromStr for ResourceManager {
    type Err = WorkloadError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slurm" => Ok(ResourceManager::Slurm),
            "libvirt" => Ok(ResourceManager::Libvirt),
            "kubelet" => Ok(ResourceManager::Kubelet),
            other => Err(WorkloadError::Invalid(format!("unknown resource manager `{other}`"))),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("accounting line {line}: {message}")]
    Accounting { line: usize, message: String },
}

/// One compute unit (batch job, VM or pod).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadUnit {
    pub uuid: String,
    pub cluster_id: String,
    pub resource_manager: ResourceManager,
    pub user: String,
    pub project: String,
    pub created_at_ms: i64,
    pub started_at_ms: i64,
    pub ended_at_ms: Option<i64>,
    pub alloc_cpus: u32,
    pub alloc_memory_bytes: u64,
    pub gpu_indices: Vec<u32>,
}

impl WorkloadUnit {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.uuid.is_empty() || self.cluster_id.is_empty() {
            return Err(WorkloadError::Invalid("uuid and cluster_id must be non-empty".into()));
        }
        if self.user.is_empty() {
            return Err(WorkloadError::Invalid(format!("unit {} has no user", self.uuid)));
        }
        if self.started_at_ms < self.created_at_ms {
            return Err(WorkloadError::Invalid(format!(
                "unit {} starts before it was created",
                self.uuid
            )));
        }
        if let Some(end) = self.ended_at_ms {
            if end < self.started_at_ms {
                return Err(WorkloadError::Invalid(format!(
                    "unit {} ends before it starts",
                    self.uuid
                )));
            }
        }
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.ended_at_ms.is_none()
    }

    /// Wall time in seconds, measured up to `now_ms` while running.
    pub fn duration_s(&self, now_ms: i64) -> f64 {
        let end = self.ended_at_ms.unwrap_or(now_ms);
        (end - self.started_at_ms).max(0) as f64 / 1000.0
    }

    /// Parses one accounting line. Accounting exports carry no separate
    /// submission time, so `created_at` equals `started_at`.
    pub fn from_accounting_line(line: &str, cluster_id: &str, line_no: usize) -> Result<Self, WorkloadError> {
        let err = |message: String| WorkloadError::Accounting { line: line_no, message };
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let uuid = fields[0].trim();
        if uuid.is_empty() {
            return Err(err("empty uuid".into()));
        }
        let started_at_ms = parse_time(fields[3]).map_err(err)?;
        let ended_at_ms = match fields[4].trim() {
            "" => None,
            t => Some(parse_time(t).map_err(err)?),
        };
        let alloc_cpus = fields[5]
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid alloc_cpus `{}`", fields[5])))?;
        let alloc_memory_bytes = fields[6]
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid alloc_mem_bytes `{}`", fields[6])))?;
        let gpu_indices = fields[7]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| err(format!("invalid gpu index `{s}`"))))
            .collect::<Result<Vec<u32>, _>>()?;
        let unit = WorkloadUnit {
            uuid: uuid.to_string(),
            cluster_id: cluster_id.to_string(),
            resource_manager: ResourceManager::Slurm,
            user: fields[1].trim().to_string(),
            project: fields[2].trim().to_string(),
            created_at_ms: started_at_ms,
            started_at_ms,
            ended_at_ms,
            alloc_cpus,
            alloc_memory_bytes,
            gpu_indices,
        };
        unit.validate().map_err(|e| err(e.to_string()))?;
        Ok(unit)
    }

    pub fn to_accounting_line(&self) -> String {
        let gpus: Vec<String> = self.gpu_indices.iter().map(u32::to_string).collect();
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            self.uuid,
            self.user,
            self.project,
            format_time(self.started_at_ms),
            self.ended_at_ms.map(format_time).unwrap_or_default(),
            self.alloc_cpus,
            self.alloc_memory_bytes,
            gpus.join(",")
        )
    }
}

/// Parses a whole accounting file. Blank lines and `#` comments are
/// skipped; malformed lines are returned separately rather than aborting.
pub fn parse_accounting(text: &str, cluster_id: &str) -> (Vec<WorkloadUnit>, Vec<WorkloadError>) {
    let mut units = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match WorkloadUnit::from_accounting_line(trimmed, cluster_id, i + 1) {
            Ok(u) => units.push(u),
            Err(e) => errors.push(e),
        }
    }
    (units, errors)
}

fn parse_time(s: &str) -> Result<i64, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.timestamp_millis())
        .map_err(|e| format!("invalid timestamp `{s}`: {e}"))
}

pub fn format_time(ms: i64) -> String {
    let t = DateTime::<Utc>::from_timestamp_millis(ms).unwrap_or_default();
    let precision = if ms % 1000 == 0 {
        SecondsFormat::Secs
    } else {
        SecondsFormat::Millis
    };
    t.to_rfc3339_opts(precision, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Unit,
    User,
    Project,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Unit => "unit",
            Scope::User => "user",
            Scope::Project => "project",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = WorkloadError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(Scope::Unit),
            "user" => Ok(Scope::User),
            "project" => Ok(Scope::Project),
            other => Err(WorkloadError::Invalid(format!("unknown scope `{other}`"))),
        }
    }
}

/// Totals and usage averages for a unit, user or project over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub scope: Scope,
    pub key: String,
    pub window_start_ms: i64,
    pub window_end_ms: i64,
    /// Wall seconds covered; the weight used when averaging fractions.
    pub wall_seconds: f64,
    pub total_cpu_time_seconds: f64,
    pub avg_cpu_usage_fraction: f64,
    pub avg_memory_usage_fraction: f64,
    pub total_energy_kwh: f64,
    pub cpu_energy_kwh: f64,
    pub dram_energy_kwh: f64,
    pub network_energy_kwh: f64,
    pub total_emissions_grams: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_gpu_usage_fraction: Option<f64>,
    #[serde(default)]
    pub no_data: bool,
}

impl AggregateMetrics {
    pub fn zero(scope: Scope, key: &str, window_start_ms: i64, window_end_ms: i64) -> Self {
        Self {
            scope,
            key: key.to_string(),
            window_start_ms,
            window_end_ms,
            wall_seconds: 0.0,
            total_cpu_time_seconds: 0.0,
            avg_cpu_usage_fraction: 0.0,
            avg_memory_usage_fraction: 0.0,
            total_energy_kwh: 0.0,
            cpu_energy_kwh: 0.0,
            dram_energy_kwh: 0.0,
            network_energy_kwh: 0.0,
            total_emissions_grams: 0.0,
            avg_gpu_usage_fraction: None,
            no_data: false,
        }
    }
}
