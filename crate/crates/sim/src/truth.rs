//! Ground truth for the trace: the per-job split evaluated directly on the
//! quantized values the exporters publish, plus a validation pass over the
//! forward model. Written independently of the attribution engine so the
//! end-to-end run compares two implementations.

use crate::trace::{AttributedSample, NodeTrace, Trace};

struct JobInput {
    job: usize,
    cpu_rate: f64,
    memory: f64,
}

/// Fills `attributed` for every job and `unattributed_watts` for every node.
#[allow(clippy::needless_range_loop)]
pub fn attribute_trace(trace: &mut Trace) {
    let dt = trace.interval_ms as f64 / 1000.0;
    let last = trace.last_instant;
    for n in 0..trace.nodes.len() {
        let mut unattributed = vec![0.0; last + 1];
        for k in 1..=last {
            let node = &trace.nodes[n];
            let inputs: Vec<JobInput> = node
                .jobs
                .iter()
                .copied()
                .filter(|&j| trace.jobs[j].active_in(k))
                .map(|j| JobInput {
                    job: j,
                    cpu_rate: trace.jobs[j].cpu_usec_in(k) as f64 / 1e6 / dt,
                    memory: trace.jobs[j].memory_at(k) as f64,
                })
                .collect();
            let (shares, rest) = split(node, k, dt, &inputs);
            unattributed[k] = rest;
            for (input, share) in inputs.iter().zip(shares) {
                trace.jobs[input.job].attributed.push(share);
            }
        }
        let node = &mut trace.nodes[n];
        unattributed[0] = base_power(node, 0);
        node.unattributed_watts = unattributed;
    }
}

fn base_power(node: &NodeTrace, k: usize) -> f64 {
    let ipmi = node.ipmi_watts[k] as f64;
    if node.profile.ipmi_includes_gpu {
        let gpu: f64 = node.gpu_power[k].iter().map(|&p| p as f64).sum();
        (ipmi - gpu).max(0.0)
    } else {
        ipmi
    }
}

fn energy_watts(series: &[Vec<u64>], k: usize, dt: f64) -> f64 {
    series.iter().map(|s| (s[k] - s[k - 1]) as f64).sum::<f64>() / 1e6 / dt
}

/// Power of job `j` = S·P·R_cpu/(R_cpu+R_dram)·T_j/T_node
///                  + S·P·R_dram/(R_cpu+R_dram)·M_j/M_node + F·P/N,
/// where S is the serviceable and F the network fraction.
fn split(node: &NodeTrace, k: usize, dt: f64, jobs: &[JobInput]) -> (Vec<AttributedSample>, f64) {
    let p = base_power(node, k);
    if jobs.is_empty() {
        return (Vec::new(), p);
    }
    let net = node.profile.network_fraction;
    let serviceable = 1.0 - net - node.profile.storage_fraction;
    let has_cpu = node.has(wattline_core::RaplDomain::CpuPackage);
    let has_dram = node.has(wattline_core::RaplDomain::Dram);
    let r_cpu = if has_cpu {
        energy_watts(&node.package_uj, k, dt)
    } else {
        0.0
    };
    let r_dram = if has_dram {
        energy_watts(&node.dram_uj, k, dt)
    } else {
        0.0
    };
    let (cpu_weight, dram_weight) = if r_cpu + r_dram > 0.0 {
        (r_cpu / (r_cpu + r_dram), r_dram / (r_cpu + r_dram))
    } else {
        (1.0, 0.0)
    };
    let t_node = (node.busy_ticks[k] - node.busy_ticks[k - 1]) as f64 / 100.0 / dt;
    let m_node = node.memory_used_bytes[k] as f64;
    let n = jobs.len() as f64;

    let mut total = 0.0;
    let shares: Vec<AttributedSample> = jobs
        .iter()
        .map(|j| {
            let cpu_watts = if t_node > 0.0 {
                serviceable * p * cpu_weight * j.cpu_rate / t_node
            } else {
                0.0
            };
            let dram_watts = if m_node > 0.0 {
                serviceable * p * dram_weight * j.memory / m_node
            } else {
                0.0
            };
            let network_watts = net * p / n;
            let watts = cpu_watts + dram_watts + network_watts;
            total += watts;
            AttributedSample {
                watts,
                cpu_watts,
                dram_watts,
                network_watts,
            }
        })
        .collect();
    (shares, (p - total).max(0.0))
}

/// One failed consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub instance: String,
    pub instant: usize,
    pub what: String,
}

/// Re-derives node totals from the jobs and checks the forward model:
/// shares never exceed totals, counters never decrease, power closes
/// (node power = idle floor + Σ job power) and no job exceeds its allocation.
pub fn validate_trace(trace: &Trace) -> Vec<Violation> {
    let dt = trace.interval_ms as f64 / 1000.0;
    let mut out = Vec::new();
    for node in &trace.nodes {
        let mut fail = |k: usize, what: String| {
            out.push(Violation {
                instance: node.instance.clone(),
                instant: k,
                what,
            })
        };
        for k in 0..=trace.last_instant {
            let active: Vec<_> = node
                .jobs
                .iter()
                .map(|&j| &trace.jobs[j])
                .filter(|j| j.active_in(k))
                .collect();
            let mem: u64 = active.iter().map(|j| j.memory_at(k)).sum();
            if mem > node.memory_used_bytes[k] {
                fail(
                    k,
                    format!("job memory {mem} exceeds node memory {}", node.memory_used_bytes[k]),
                );
            }
            let true_sum: f64 = active.iter().map(|j| j.true_watts[k - j.start - 1]).sum();
            let closure = node.idle_floor_watts[k] + true_sum;
            let rel = (node.ipmi_true_watts[k] - closure).abs() / node.ipmi_true_watts[k];
            if rel > 1e-9 {
                fail(
                    k,
                    format!("power does not close: {} vs {closure}", node.ipmi_true_watts[k]),
                );
            }
            if k == 0 {
                continue;
            }
            let usec: u64 = active.iter().map(|j| j.cpu_usec_in(k)).sum();
            let node_usec = (node.busy_ticks[k] - node.busy_ticks[k - 1]) * 10_000;
            if usec > node_usec {
                fail(k, format!("job cpu {usec} us exceeds node busy {node_usec} us"));
            }
            for j in &active {
                let rate = j.cpu_usec_in(k) as f64 / 1e6 / dt;
                if rate > j.unit.alloc_cpus as f64 * (1.0 + 1e-9) {
                    fail(
                        k,
                        format!("job {} uses {rate} cores of {}", j.unit.uuid, j.unit.alloc_cpus),
                    );
                }
                if j.memory_at(k) > j.unit.alloc_memory_bytes {
                    fail(k, format!("job {} exceeds its memory allocation", j.unit.uuid));
                }
            }
            let series = node.package_uj.iter().chain(&node.dram_uj);
            if series.into_iter().any(|s| s[k] < s[k - 1]) || node.idle_ticks[k] < node.idle_ticks[k - 1] {
                fail(k, "counter decreased".into());
            }
        }
    }
    out
}
