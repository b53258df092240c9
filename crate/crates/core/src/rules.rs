//! Recording rules that evaluate the per-workload power split inside a TSDB.
//!
//! The rules express the same split as [`crate::attribute_power`] over the
//! exporter's families: rates of the cpu-seconds counters for CPU time,
//! the memory gauges as they are. Degenerate cases (zero RAPL sum, idle
//! node) evaluate to NaN in the TSDB; the in-process engine handles them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, HardwareProfile, RaplDomain};

pub const RECORD_NAME: &str = "wattline:workload_power_watts";
pub const DEFAULT_RATE_WINDOW: &str = "2m";

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("naming map has no family for `{0}`")]
    MissingFamily(&'static str),
    #[error(transparent)]
    Profile(#[from] AttributionError),
    #[error("invalid rate window `{0}`")]
    BadWindow(String),
}

/// The exporter families a rule refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricRole {
    NodePower,
    RaplEnergy,
    WorkloadCpu,
    WorkloadMemory,
    NodeCpu,
    NodeMemory,
    GpuPower,
}

impl MetricRole {
    pub fn key(self) -> &'static str {
        match self {
            MetricRole::NodePower => "node_power",
            MetricRole::RaplEnergy => "rapl_energy",
            MetricRole::WorkloadCpu => "workload_cpu",
            MetricRole::WorkloadMemory => "workload_memory",
            MetricRole::NodeCpu => "node_cpu",
            MetricRole::NodeMemory => "node_memory",
            MetricRole::GpuPower => "gpu_power",
        }
    }

    pub fn default_family(self) -> &'static str {
        match self {
            MetricRole::NodePower => "wattline_node_power_watts",
            MetricRole::RaplEnergy => "wattline_rapl_energy_microjoules_total",
            MetricRole::WorkloadCpu => "wattline_cpu_seconds_total",
            MetricRole::WorkloadMemory => "wattline_memory_bytes",
            MetricRole::NodeCpu => "wattline_node_cpu_seconds_total",
            MetricRole::NodeMemory => "wattline_node_memory_bytes",
            MetricRole::GpuPower => "wattline_gpu_power_watts",
        }
    }

    pub const ALL: [MetricRole; 7] = [
        MetricRole::NodePower,
        MetricRole::RaplEnergy,
        MetricRole::WorkloadCpu,
        MetricRole::WorkloadMemory,
        MetricRole::NodeCpu,
        MetricRole::NodeMemory,
        MetricRole::GpuPower,
    ];
}

/// Role key to family name, e.g. `workload_cpu: wattline_cpu_seconds_total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NamingMap(BTreeMap<String, String>);

impl Default for NamingMap {
    fn default() -> Self {
        Self(
            MetricRole::ALL
                .iter()
                .map(|r| (r.key().to_string(), r.default_family().to_string()))
                .collect(),
        )
    }
}

impl NamingMap {
    pub fn empty() -> Self {
        Self(BTreeMap::new())
    }

    pub fn with(mut self, role: MetricRole, family: &str) -> Self {
        self.0.insert(role.key().to_string(), family.to_string());
        self
    }

    pub fn without(mut self, role: MetricRole) -> Self {
        self.0.remove(role.key());
        self
    }

    pub fn get(&self, role: MetricRole) -> Result<&str, RuleError> {
        self.0
            .get(role.key())
            .map(String::as_str)
            .ok_or(RuleError::MissingFamily(role.key()))
    }
}

/// A hardware profile with a name, as stored in profile files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedProfile {
    pub name: String,
    pub rapl_domains: Vec<RaplDomain>,
    #[serde(default)]
    pub ipmi_includes_gpu: bool,
    #[serde(default = "default_network")]
    pub network_fraction: f64,
    #[serde(default)]
    pub storage_fraction: f64,
    /// Regex over the `instance` label selecting the nodes of this group.
    #[serde(default)]
    pub instances: Option<String>,
    #[serde(default)]
    pub naming: Option<NamingMap>,
}

fn default_network() -> f64 {
    0.10
}

impl NamedProfile {
    pub fn profile(&self) -> HardwareProfile<f64> {
        let mut p = HardwareProfile::new(&self.rapl_domains, self.ipmi_includes_gpu);
        p.network_fraction = self.network_fraction;
        p.storage_fraction = self.storage_fraction;
        p
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

struct Names<'a> {
    window: &'a str,
    ipmi: &'a str,
    rapl: &'a str,
    job_cpu: &'a str,
    job_mem: &'a str,
    node_cpu: &'a str,
    node_mem: &'a str,
    gpu: &'a str,
}

impl Names<'_> {
    fn base(&self, gpu: bool) -> String {
        let ipmi = format!("sum by (instance) ({})", self.ipmi);
        if gpu {
            format!("clamp_min({ipmi} - on (instance) sum by (instance) ({}), 0)", self.gpu)
        } else {
            ipmi
        }
    }

    fn rapl(&self, domain: RaplDomain) -> String {
        format!(
            "sum by (instance) (rate({}{{domain=\"{}\"}}[{}]))",
            self.rapl,
            domain.as_str(),
            self.window
        )
    }

    fn node_cpu(&self) -> String {
        format!("sum by (instance) (rate({}[{}]))", self.node_cpu, self.window)
    }

    fn job_cpu(&self) -> String {
        format!(
            "sum by (instance, workload_id) (rate({}[{}]))",
            self.job_cpu, self.window
        )
    }
}

/// The expression for one profile.
pub fn generate_rule_expression(
    profile: &HardwareProfile<f64>,
    names: &NamingMap,
    rate_window: &str,
) -> Result<String, RuleError> {
    profile.validate()?;
    if rate_window.is_empty() || !rate_window.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(RuleError::BadWindow(rate_window.to_string()));
    }
    let cpu = profile.has(RaplDomain::CpuPackage);
    let dram = profile.has(RaplDomain::Dram);
    let n = Names {
        window: rate_window,
        ipmi: names.get(MetricRole::NodePower)?,
        rapl: if cpu && dram {
            names.get(MetricRole::RaplEnergy)?
        } else {
            ""
        },
        job_cpu: names.get(MetricRole::WorkloadCpu)?,
        job_mem: if dram {
            names.get(MetricRole::WorkloadMemory)?
        } else {
            ""
        },
        node_cpu: if dram && !cpu {
            ""
        } else {
            names.get(MetricRole::NodeCpu)?
        },
        node_mem: if dram { names.get(MetricRole::NodeMemory)? } else { "" },
        gpu: if profile.ipmi_includes_gpu {
            names.get(MetricRole::GpuPower)?
        } else {
            ""
        },
    };
    let base = n.base(profile.ipmi_includes_gpu);
    let serviceable = num(profile.serviceable_fraction());
    let network = num(profile.network_fraction);

    let mut terms = Vec::new();
    if cpu && dram {
        let rapl_sum = format!("({} + {})", n.rapl(RaplDomain::CpuPackage), n.rapl(RaplDomain::Dram));
        terms.push(format!(
            "(\n  {serviceable} * {base}\n    * {}\n    / {rapl_sum}\n    / {}\n)\n* on (instance) group_right ()\n  {}",
            n.rapl(RaplDomain::CpuPackage),
            n.node_cpu(),
            n.job_cpu()
        ));
        terms.push(format!(
            "(\n  {serviceable} * {base}\n    * {}\n    / {rapl_sum}\n    / sum by (instance) ({})\n)\n* on (instance) group_right ()\n  sum by (instance, workload_id) ({})",
            n.rapl(RaplDomain::Dram),
            n.node_mem,
            n.job_mem
        ));
    } else if dram {
        terms.push(format!(
            "(\n  {serviceable} * {base}\n    / sum by (instance) ({})\n)\n* on (instance) group_right ()\n  sum by (instance, workload_id) ({})",
            n.node_mem, n.job_mem
        ));
    } else {
        terms.push(format!(
            "(\n  {serviceable} * {base}\n    / {}\n)\n* on (instance) group_right ()\n  {}",
            n.node_cpu(),
            n.job_cpu()
        ));
    }
    terms.push(format!(
        "(\n  {network} * {base}\n    / count by (instance) (group by (instance, workload_id) ({job}))\n)\n* on (instance) group_right ()\n  group by (instance, workload_id) ({job})",
        job = n.job_cpu
    ));
    Ok(terms.join("\n+\n"))
}

/// A complete rule file with one group holding the power rule.
pub fn generate_rule_file(
    group: &str,
    profile: &HardwareProfile<f64>,
    names: &NamingMap,
    rate_window: &str,
) -> Result<String, RuleError> {
    let expr = generate_rule_expression(profile, names, rate_window)?;
    let mut out = String::new();
    let _ = writeln!(out, "groups:");
    let _ = writeln!(out, "  - name: {group}");
    let _ = writeln!(out, "    rules:");
    let _ = writeln!(out, "      - record: {RECORD_NAME}");
    let _ = writeln!(out, "        expr: |");
    for line in expr.lines() {
        let _ = writeln!(out, "          {line}");
    }
    Ok(out)
}
