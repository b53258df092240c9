//! Splitting measured node power among the workloads running on the node.
//!
//! The node power reported by the BMC is the base. A configurable fraction
//! goes to the network and is shared equally between running workloads. The
//! remainder is divided between CPU and DRAM using the ratio of the RAPL
//! readings, and each half is shared by CPU-time share and memory share.
//!
//! Degenerate points:
//! - no RAPL domains, or a RAPL sum of zero: the whole serviceable power is
//!   shared by CPU time;
//! - zero node CPU time: the CPU term is zero;
//! - zero node memory: the DRAM term is zero;
//! - no workloads: nothing is attributed and the full base is reported as
//!   unattributed.
//!
//! The storage fraction is carved out of the serviceable power and left
//! unattributed.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Relative slack allowed when workload shares are compared with node totals.
pub const SHARE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaplDomain {
    CpuPackage,
    Dram,
}

impl RaplDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            RaplDomain::CpuPackage => "cpu_package",
            RaplDomain::Dram => "dram",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cpu_package" => Some(RaplDomain::CpuPackage),
            "dram" => Some(RaplDomain::Dram),
            _ => None,
        }
    }
}

impl fmt::Display for RaplDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("`{field}` must be finite and non-negative, got {value}")]
    InvalidInput { field: String, value: f64 },
    #[error("sum of workload {what} ({sum}) exceeds the node total ({total})")]
    ShareExceedsTotal { what: &'static str, sum: f64, total: f64 },
    #[error("profile expects RAPL domain `{0}` but the snapshot has no reading for it")]
    MissingDomain(RaplDomain),
    #[error("snapshot has a `{0}` reading but the profile does not list that domain")]
    UnexpectedDomain(RaplDomain),
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
}

fn default_network_fraction<S: Scalar>() -> S {
    S::of(0.10)
}

fn default_storage_fraction<S: Scalar>() -> S {
    S::zero()
}

/// Which power sources a node group has and how node power is split there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile<S: Scalar> {
    pub rapl_domains: BTreeSet<RaplDomain>,
    #[serde(default)]
    pub ipmi_includes_gpu: bool,
    #[serde(default = "default_network_fraction")]
    pub network_fraction: S,
    #[serde(default = "default_storage_fraction")]
    pub storage_fraction: S,
}

impl<S: Scalar> HardwareProfile<S> {
    pub fn new(domains: &[RaplDomain], ipmi_includes_gpu: bool) -> Self {
        Self {
            rapl_domains: domains.iter().copied().collect(),
            ipmi_includes_gpu,
            network_fraction: default_network_fraction(),
            storage_fraction: default_storage_fraction(),
        }
    }

    pub fn has(&self, domain: RaplDomain) -> bool {
        self.rapl_domains.contains(&domain)
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        let net = self.network_fraction;
        let storage = self.storage_fraction;
        for (name, v) in [("network_fraction", net), ("storage_fraction", storage)] {
            if !v.is_finite() || v < S::zero() || v >= S::one() {
                return Err(AttributionError::InvalidProfile(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if net + storage >= S::one() {
            return Err(AttributionError::InvalidProfile(format!(
                "network_fraction + storage_fraction must be < 1, got {}",
                net + storage
            )));
        }
        Ok(())
    }

    /// Fraction of the base power shared by CPU and DRAM.
    pub fn serviceable_fraction(&self) -> S {
        S::one() - self.network_fraction - self.storage_fraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadUsage<S> {
    pub workload_id: String,
    /// CPU seconds consumed per second over the sampling interval.
    pub cpu_rate: S,
    pub memory_bytes: S,
}

impl<S: Scalar> WorkloadUsage<S> {
    pub fn new(workload_id: impl Into<String>, cpu_rate: S, memory_bytes: S) -> Self {
        Self {
            workload_id: workload_id.into(),
            cpu_rate,
            memory_bytes,
        }
    }
}

/// Every per-node measurement needed to split power at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot<S> {
    pub timestamp_ms: i64,
    pub ipmi_watts: S,
    pub rapl_cpu_watts: Option<S>,
    pub rapl_dram_watts: Option<S>,
    /// Total GPU draw; only subtracted when the profile says IPMI includes it.
    pub gpu_watts: S,
    pub node_cpu_rate: S,
    pub node_memory_bytes: S,
    pub workloads: Vec<WorkloadUsage<S>>,
}

impl<S: Scalar> NodeSnapshot<S> {
    pub fn validate(&self) -> Result<(), AttributionError> {
        let check = |field: &str, v: S| {
            if !v.is_finite() || v < S::zero() {
                Err(AttributionError::InvalidInput {
                    field: field.to_string(),
                    value: v.to_f64().unwrap_or(f64::NAN),
                })
            } else {
                Ok(())
            }
        };
        check("ipmi_watts", self.ipmi_watts)?;
        if let Some(v) = self.rapl_cpu_watts {
            check("rapl_cpu_watts", v)?;
        }
        if let Some(v) = self.rapl_dram_watts {
            check("rapl_dram_watts", v)?;
        }
        check("gpu_watts", self.gpu_watts)?;
        check("node_cpu_rate", self.node_cpu_rate)?;
        check("node_memory_bytes", self.node_memory_bytes)?;
        let mut cpu_sum = S::zero();
        let mut mem_sum = S::zero();
        for w in &self.workloads {
            check(&format!("{}.cpu_rate", w.workload_id), w.cpu_rate)?;
            check(&format!("{}.memory_bytes", w.workload_id), w.memory_bytes)?;
            cpu_sum = cpu_sum + w.cpu_rate;
            mem_sum = mem_sum + w.memory_bytes;
        }
        let slack = S::one() + S::of(SHARE_EPSILON);
        if cpu_sum > self.node_cpu_rate * slack {
            return Err(AttributionError::ShareExceedsTotal {
                what: "cpu time",
                sum: cpu_sum.to_f64().unwrap_or(f64::NAN),
                total: self.node_cpu_rate.to_f64().unwrap_or(f64::NAN),
            });
        }
        if mem_sum > self.node_memory_bytes * slack {
            return Err(AttributionError::ShareExceedsTotal {
                what: "memory",
                sum: mem_sum.to_f64().unwrap_or(f64::NAN),
                total: self.node_memory_bytes.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedPower<S> {
    pub workload_id: String,
    pub watts: S,
    pub cpu_watts: S,
    pub dram_watts: S,
    pub network_watts: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution<S> {
    pub timestamp_ms: i64,
    pub workloads: Vec<AttributedPower<S>>,
    /// Base power left after the workload shares.
    pub unattributed_watts: S,
}

/// Splits the snapshot's node power among its workloads.
pub fn attribute_power<S: Scalar>(
    snapshot: &NodeSnapshot<S>,
    profile: &HardwareProfile<S>,
) -> Result<Attribution<S>, AttributionError> {
    profile.validate()?;
    snapshot.validate()?;
    for (domain, reading) in [
        (RaplDomain::CpuPackage, snapshot.rapl_cpu_watts),
        (RaplDomain::Dram, snapshot.rapl_dram_watts),
    ] {
        match (profile.has(domain), reading.is_some()) {
            (true, false) => return Err(AttributionError::MissingDomain(domain)),
            (false, true) => return Err(AttributionError::UnexpectedDomain(domain)),
            _ => {}
        }
    }

    let zero = S::zero();
    let base = if profile.ipmi_includes_gpu {
        (snapshot.ipmi_watts - snapshot.gpu_watts).max(zero)
    } else {
        snapshot.ipmi_watts
    };
    if snapshot.workloads.is_empty() {
        return Ok(Attribution {
            timestamp_ms: snapshot.timestamp_ms,
            workloads: Vec::new(),
            unattributed_watts: base,
        });
    }

    let serviceable = profile.serviceable_fraction() * base;
    let rapl_cpu = snapshot.rapl_cpu_watts.unwrap_or(zero);
    let rapl_dram = snapshot.rapl_dram_watts.unwrap_or(zero);
    let rapl_sum = rapl_cpu + rapl_dram;
    let (cpu_pool, dram_pool) = if rapl_sum > zero {
        (
            serviceable * (rapl_cpu / rapl_sum),
            serviceable * (rapl_dram / rapl_sum),
        )
    } else {
        (serviceable, zero)
    };
    let count = S::from_usize(snapshot.workloads.len()).unwrap_or_else(S::one);
    let network_each = profile.network_fraction * base / count;

    let mut total = zero;
    let workloads = snapshot
        .workloads
        .iter()
        .map(|w| {
            let cpu_watts = if snapshot.node_cpu_rate > zero {
                cpu_pool * (w.cpu_rate / snapshot.node_cpu_rate)
            } else {
                zero
            };
            let dram_watts = if snapshot.node_memory_bytes > zero {
                dram_pool * (w.memory_bytes / snapshot.node_memory_bytes)
            } else {
                zero
            };
            let watts = cpu_watts + dram_watts + network_each;
            total = total + watts;
            AttributedPower {
                workload_id: w.workload_id.clone(),
                watts,
                cpu_watts,
                dram_watts,
                network_watts: network_each,
            }
        })
        .collect();

    Ok(Attribution {
        timestamp_ms: snapshot.timestamp_ms,
        workloads,
        unattributed_watts: (base - total).max(zero),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the per-job formula, term by term.
    #[allow(clippy::too_many_arguments)]
    fn formula_direct(
        ipmi: f64,
        rapl_cpu: f64,
        rapl_dram: f64,
        t_job: f64,
        t_node: f64,
        m_job: f64,
        m_node: f64,
        n_jobs: f64,
    ) -> f64 {
        0.9 * ipmi * (rapl_cpu / (rapl_cpu + rapl_dram)) * (t_job / t_node)
            + 0.9 * ipmi * (rapl_dram / (rapl_cpu + rapl_dram)) * (m_job / m_node)
            + 0.1 * ipmi * (1.0 / n_jobs)
    }

    fn full_profile() -> HardwareProfile<f64> {
        HardwareProfile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], false)
    }

    fn two_job_snapshot() -> NodeSnapshot<f64> {
        NodeSnapshot {
            timestamp_ms: 0,
            ipmi_watts: 500.0,
            rapl_cpu_watts: Some(200.0),
            rapl_dram_watts: Some(50.0),
            gpu_watts: 0.0,
            node_cpu_rate: 40.0,
            node_memory_bytes: 64e9,
            workloads: vec![WorkloadUsage::new("a", 20.0, 16e9), WorkloadUsage::new("b", 10.0, 8e9)],
        }
    }

    #[test]
    fn point_check_matches_direct_evaluation() {
        let oracle = formula_direct(500.0, 200.0, 50.0, 20.0, 40.0, 16e9, 64e9, 2.0);
        // 0.9*500*0.8*0.5 + 0.9*500*0.2*0.25 + 0.1*500/2
        assert_eq!(oracle, 227.5);
        let out = attribute_power(&two_job_snapshot(), &full_profile()).unwrap();
        let a = &out.workloads[0];
        assert!((a.watts - oracle).abs() <= 1e-9 * oracle);
        assert!((a.cpu_watts - 180.0).abs() < 1e-9);
        assert!((a.dram_watts - 22.5).abs() < 1e-9);
        assert!((a.network_watts - 25.0).abs() < 1e-9);
    }

    #[test]
    fn single_job_owning_node_gets_everything() {
        let snap = NodeSnapshot {
            timestamp_ms: 0,
            ipmi_watts: 400.0,
            rapl_cpu_watts: Some(123.0),
            rapl_dram_watts: Some(17.0),
            gpu_watts: 0.0,
            node_cpu_rate: 8.0,
            node_memory_bytes: 1e9,
            workloads: vec![WorkloadUsage::new("only", 8.0, 1e9)],
        };
        let out = attribute_power(&snap, &full_profile()).unwrap();
        assert!((out.workloads[0].watts - 400.0).abs() < 1e-9);
        assert!(out.unattributed_watts.abs() < 1e-9);
    }

    #[test]
    fn idle_job_gets_network_share_only() {
        let snap = NodeSnapshot {
            timestamp_ms: 0,
            ipmi_watts: 300.0,
            rapl_cpu_watts: Some(100.0),
            rapl_dram_watts: Some(20.0),
            gpu_watts: 0.0,
            node_cpu_rate: 4.0,
            node_memory_bytes: 1e9,
            workloads: vec![WorkloadUsage::new("idle", 0.0, 0.0)],
        };
        let out = attribute_power(&snap, &full_profile()).unwrap();
        assert!((out.workloads[0].watts - 30.0).abs() < 1e-12);
        assert!((out.unattributed_watts - 270.0).abs() < 1e-9);
    }

    #[test]
    fn cpu_only_profile_splits_by_cpu_time() {
        let mut snap = two_job_snapshot();
        snap.rapl_dram_watts = None;
        let profile = HardwareProfile::new(&[RaplDomain::CpuPackage], false);
        let out = attribute_power(&snap, &profile).unwrap();
        // 0.9*500*0.5 + 25
        assert!((out.workloads[0].watts - 250.0).abs() < 1e-9);
        assert_eq!(out.workloads[0].dram_watts, 0.0);
    }

    #[test]
    fn zero_rapl_sum_falls_back_to_cpu_share() {
        let mut snap = two_job_snapshot();
        snap.rapl_cpu_watts = Some(0.0);
        snap.rapl_dram_watts = Some(0.0);
        let out = attribute_power(&snap, &full_profile()).unwrap();
        assert!((out.workloads[0].cpu_watts - 225.0).abs() < 1e-9);
        assert_eq!(out.workloads[0].dram_watts, 0.0);
    }

    #[test]
    fn zero_node_totals_zero_their_terms() {
        let mut snap = two_job_snapshot();
        snap.node_cpu_rate = 0.0;
        snap.node_memory_bytes = 0.0;
        for w in &mut snap.workloads {
            w.cpu_rate = 0.0;
            w.memory_bytes = 0.0;
        }
        let out = attribute_power(&snap, &full_profile()).unwrap();
        for w in &out.workloads {
            assert_eq!(w.cpu_watts, 0.0);
            assert_eq!(w.dram_watts, 0.0);
            assert!((w.network_watts - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_workloads_leaves_base_unattributed() {
        let mut snap = two_job_snapshot();
        snap.workloads.clear();
        let out = attribute_power(&snap, &full_profile()).unwrap();
        assert!(out.workloads.is_empty());
        assert_eq!(out.unattributed_watts, 500.0);
    }

    #[test]
    fn gpu_power_removed_before_split() {
        let mut snap = two_job_snapshot();
        snap.ipmi_watts = 900.0;
        snap.gpu_watts = 400.0;
        let profile = HardwareProfile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], true);
        let out = attribute_power(&snap, &profile).unwrap();
        assert!((out.workloads[0].watts - 227.5).abs() < 1e-9);

        snap.gpu_watts = 1000.0;
        let out = attribute_power(&snap, &profile).unwrap();
        assert!(out.workloads.iter().all(|w| w.watts == 0.0));
    }

    #[test]
    fn rejects_negative_and_mismatched_inputs() {
        let mut snap = two_job_snapshot();
        snap.ipmi_watts = -1.0;
        assert!(matches!(
            attribute_power(&snap, &full_profile()),
            Err(AttributionError::InvalidInput { .. })
        ));

        let mut snap = two_job_snapshot();
        snap.rapl_dram_watts = None;
        assert_eq!(
            attribute_power(&snap, &full_profile()).unwrap_err(),
            AttributionError::MissingDomain(RaplDomain::Dram)
        );
        let cpu_only = HardwareProfile::new(&[RaplDomain::CpuPackage], false);
        assert_eq!(
            attribute_power(&two_job_snapshot(), &cpu_only).unwrap_err(),
            AttributionError::UnexpectedDomain(RaplDomain::Dram)
        );

        let mut snap = two_job_snapshot();
        snap.workloads[0].cpu_rate = 100.0;
        assert!(matches!(
            attribute_power(&snap, &full_profile()),
            Err(AttributionError::ShareExceedsTotal { .. })
        ));
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = full_profile();
        p.network_fraction = 0.6;
        p.storage_fraction = 0.4;
        assert!(matches!(
            attribute_power(&two_job_snapshot(), &p),
            Err(AttributionError::InvalidProfile(_))
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let snap = NodeSnapshot::<f32> {
            timestamp_ms: 0,
            ipmi_watts: 500.0,
            rapl_cpu_watts: Some(200.0),
            rapl_dram_watts: Some(50.0),
            gpu_watts: 0.0,
            node_cpu_rate: 40.0,
            node_memory_bytes: 64.0,
            workloads: vec![WorkloadUsage::new("a", 20.0, 16.0), WorkloadUsage::new("b", 10.0, 8.0)],
        };
        let profile = HardwareProfile::<f32>::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], false);
        let out = attribute_power(&snap, &profile).unwrap();
        assert!((out.workloads[0].watts - 227.5).abs() < 1e-3);
    }

    #[test]
    fn profile_deserializes_with_defaults() {
        let p: HardwareProfile<f64> = serde_json::from_str(r#"{"rapl_domains":["cpu_package"]}"#).unwrap();
        assert_eq!(p.network_fraction, 0.1);
        assert_eq!(p.storage_fraction, 0.0);
        assert!(!p.ipmi_includes_gpu);
    }

    proptest! {
        #[test]
        fn components_sum_and_stay_non_negative(
            ipmi in 0.0f64..2000.0,
            cpu in 0.0f64..400.0,
            dram in 0.0f64..100.0,
            jobs in proptest::collection::vec((0.0f64..8.0, 0.0f64..1e10), 0..6),
            extra_cpu in 0.0f64..4.0,
            extra_mem in 0.0f64..1e10,
        ) {
            let node_cpu: f64 = jobs.iter().map(|j| j.0).sum::<f64>() + extra_cpu;
            let node_mem: f64 = jobs.iter().map(|j| j.1).sum::<f64>() + extra_mem;
            let snap = NodeSnapshot {
                timestamp_ms: 0,
                ipmi_watts: ipmi,
                rapl_cpu_watts: Some(cpu),
                rapl_dram_watts: Some(dram),
                gpu_watts: 0.0,
                node_cpu_rate: node_cpu,
                node_memory_bytes: node_mem,
                workloads: jobs.iter().enumerate()
                    .map(|(i, j)| WorkloadUsage::new(i.to_string(), j.0, j.1)).collect(),
            };
            let out = attribute_power(&snap, &full_profile()).unwrap();
            let mut sum = 0.0;
            for w in &out.workloads {
                prop_assert!(w.cpu_watts >= 0.0 && w.dram_watts >= 0.0 && w.network_watts >= 0.0);
                let parts = w.cpu_watts + w.dram_watts + w.network_watts;
                prop_assert!((w.watts - parts).abs() <= 1e-12 * w.watts.max(1.0));
                sum += w.watts;
            }
            prop_assert!(sum <= ipmi * (1.0 + 1e-9) + 1e-9);
        }
    }
}
