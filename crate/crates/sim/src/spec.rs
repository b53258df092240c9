//! Cluster description read from a TOML file.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use wattline_core::{Profile, RaplDomain};

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub seed: u64,
    #[serde(default = "default_cluster")]
    pub cluster_id: String,
    #[serde(default = "default_region")]
    pub region: String,
    /// RFC 3339 start of the simulated window.
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_duration")]
    pub duration_s: u64,
    #[serde(default = "default_interval")]
    pub scrape_interval_s: u64,
    pub node_count: usize,
    #[serde(default = "default_sockets")]
    pub sockets_per_node: u32,
    #[serde(default = "default_cores")]
    pub cores_per_node: u32,
    #[serde(default = "default_node_memory")]
    pub memory_bytes_per_node: u64,
    pub job_rate_per_day: u64,
    pub mean_job_duration_s: f64,
    pub short_job_fraction: f64,
    /// Jobs shorter than this are short (and purged by the registry).
    #[serde(default = "default_cutoff")]
    pub short_job_cutoff_s: u64,
    pub user_count: usize,
    pub project_count: usize,
    /// Probability that a job landing on a GPU node gets GPUs.
    #[serde(default = "default_gpu_fraction")]
    pub gpu_job_fraction: f64,
    #[serde(default)]
    pub emission_factor: FactorSpec,
    /// Node groups, named; node instances are `<group>-<nn>`.
    pub profiles: BTreeMap<String, GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub nodes: usize,
    pub rapl_domains: Vec<RaplDomain>,
    #[serde(default)]
    pub ipmi_includes_gpu: bool,
    #[serde(default = "default_network")]
    pub network_fraction: f64,
    #[serde(default)]
    pub storage_fraction: f64,
    #[serde(default)]
    pub gpus_per_node: u32,
}

impl GroupSpec {
    pub fn profile(&self) -> Profile {
        let mut p = Profile::new(&self.rapl_domains, self.ipmi_includes_gpu);
        p.network_fraction = self.network_fraction;
        p.storage_fraction = self.storage_fraction;
        p
    }
}

/// Hourly emission factors: `base + amplitude * sin(2π h / 24)` plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub base_grams_per_kwh: f64,
    pub amplitude_grams_per_kwh: f64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            base_grams_per_kwh: 50.0,
            amplitude_grams_per_kwh: 20.0,
        }
    }
}

fn default_cluster() -> String {
    "sim".into()
}
fn default_region() -> String {
    "FR".into()
}
fn default_start() -> String {
    "2024-03-01T00:00:00Z".into()
}
fn default_duration() -> u64 {
    86_400
}
fn default_interval() -> u64 {
    15
}
fn default_sockets() -> u32 {
    2
}
fn default_cores() -> u32 {
    64
}
fn default_node_memory() -> u64 {
    256 << 30
}
fn default_cutoff() -> u64 {
    60
}
fn default_gpu_fraction() -> f64 {
    0.5
}
fn default_network() -> f64 {
    0.10
}

impl ClusterSpec {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let spec: Self = toml::from_str(text).map_err(|e| SimError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Spec(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Spec(m));
        if self.node_count == 0 {
            return bad("node_count must be at least 1".into());
        }
        let grouped: usize = self.profiles.values().map(|g| g.nodes).sum();
        if grouped != self.node_count {
            return bad(format!(
                "profiles hold {grouped} nodes but node_count is {}",
                self.node_count
            ));
        }
        if self.sockets_per_node == 0 || self.cores_per_node == 0 {
            return bad("sockets_per_node and cores_per_node must be at least 1".into());
        }
        if self.user_count == 0 || self.project_count == 0 {
            return bad("user_count and project_count must be at least 1".into());
        }
        if !(self.mean_job_duration_s.is_finite() && self.mean_job_duration_s > 0.0) {
            return bad("mean_job_duration_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.short_job_fraction) {
            return bad("short_job_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.gpu_job_fraction) {
            return bad("gpu_job_fraction must lie in [0, 1]".into());
        }
        if self.scrape_interval_s == 0 || self.duration_s < self.scrape_interval_s {
            return bad("duration_s must cover at least one scrape interval".into());
        }
        self.start_ms()?;
        for (name, g) in &self.profiles {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return bad(format!("group name `{name}` must be alphanumeric"));
            }
            g.profile()
                .validate()
                .map_err(|e| SimError::Spec(format!("group {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn start_ms(&self) -> Result<i64, SimError> {
        DateTime::parse_from_rfc3339(&self.start)
            .map(|t| t.timestamp_millis())
            .map_err(|e| SimError::Spec(format!("invalid start `{}`: {e}", self.start)))
    }

    pub fn interval_ms(&self) -> i64 {
        self.scrape_interval_s as i64 * 1000
    }

    /// Index of the last scrape instant; instants are `0..=last_instant()`.
    pub fn last_instant(&self) -> usize {
        (self.duration_s / self.scrape_interval_s) as usize
    }

    pub fn job_count(&self) -> usize {
        (self.job_rate_per_day as f64 * self.duration_s as f64 / 86_400.0).round() as usize
    }
}
