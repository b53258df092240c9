//! Unit aggregates from raw samples, and user/project roll-ups.

use wattline_core::emissions::FactorHistory;
use wattline_core::energy::EnergyError;
use wattline_core::{integrate_emissions, integrate_energy, AggregateMetrics, Scope, WorkloadUnit};

use crate::store::PowerRow;
use crate::tsdb::RangeSeries;

/// Raw usage series of one unit over its lifetime.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitSamples {
    pub power: Vec<PowerRow>,
    pub cpu: Vec<RangeSeries>,
    pub memory: Vec<RangeSeries>,
    /// GPU utilization samples in [0, 1] of the unit's devices.
    pub gpu_utilization: Vec<f64>,
}

/// Total increase of a counter, treating a drop as a restart from zero.
pub fn counter_increase(points: &[(i64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| if w[1].1 >= w[0].1 { w[1].1 - w[0].1 } else { w[1].1 })
        .sum()
}

fn kwh(power: &[PowerRow], watts: impl Fn(&PowerRow) -> f64) -> Result<f64, EnergyError> {
    let points: Vec<(i64, f64)> = power.iter().map(|r| (r.timestamp_ms, watts(r))).collect();
    integrate_energy(&points).map(|e| e.kwh)
}

/// Aggregates one unit up to `now_ms`. Energy is the trapezoid over the
/// unit's attributed power; emissions weight each segment by the factor
/// in force at its start (zero without factor history).
pub fn aggregate_unit(
    unit: &WorkloadUnit,
    samples: &UnitSamples,
    factors: &FactorHistory,
    now_ms: i64,
) -> Result<AggregateMetrics, EnergyError> {
    let end = unit.ended_at_ms.unwrap_or(now_ms).max(unit.started_at_ms);
    let mut m = AggregateMetrics::zero(Scope::Unit, &unit.uuid, unit.started_at_ms, end);
    m.wall_seconds = unit.duration_s(now_ms);
    if samples.power.is_empty() && samples.cpu.is_empty() && samples.memory.is_empty() {
        m.no_data = true;
        return Ok(m);
    }

    m.total_energy_kwh = kwh(&samples.power, |r| r.watts)?;
    m.cpu_energy_kwh = kwh(&samples.power, |r| r.cpu_watts)?;
    m.dram_energy_kwh = kwh(&samples.power, |r| r.dram_watts)?;
    m.network_energy_kwh = kwh(&samples.power, |r| r.network_watts)?;
    if !factors.is_empty() {
        let points: Vec<(i64, f64)> = samples.power.iter().map(|r| (r.timestamp_ms, r.watts)).collect();
        m.total_emissions_grams = integrate_emissions(&points, |t| factors.factor_at(t).unwrap_or(0.0))?;
    }

    m.total_cpu_time_seconds = samples.cpu.iter().map(|s| counter_increase(&s.points)).sum();
    let capacity = unit.alloc_cpus as f64 * m.wall_seconds;
    if capacity > 0.0 {
        m.avg_cpu_usage_fraction = m.total_cpu_time_seconds / capacity;
    }
    let memory: Vec<f64> = samples
        .memory
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .collect();
    if unit.alloc_memory_bytes > 0 && !memory.is_empty() {
        let mean = memory.iter().sum::<f64>() / memory.len() as f64;
        m.avg_memory_usage_fraction = mean / unit.alloc_memory_bytes as f64;
    }
    if !unit.gpu_indices.is_empty() && !samples.gpu_utilization.is_empty() {
        let u = &samples.gpu_utilization;
        m.avg_gpu_usage_fraction = Some(u.iter().sum::<f64>() / u.len() as f64);
    }
    Ok(m)
}

/// Sums unit aggregates into one for `scope`/`key`. Usage fractions are
/// means weighted by each unit's wall seconds; the GPU mean only counts
/// units with GPU data. No units gives a zeroed aggregate flagged `no_data`.
pub fn combine(scope: Scope, key: &str, start_ms: i64, end_ms: i64, units: &[AggregateMetrics]) -> AggregateMetrics {
    let mut out = AggregateMetrics::zero(scope, key, start_ms, end_ms);
    if units.is_empty() {
        out.no_data = true;
        return out;
    }
    let (mut cpu_w, mut mem_w, mut gpu_w, mut gpu_wall) = (0.0, 0.0, 0.0, 0.0);
    for u in units {
        out.wall_seconds += u.wall_seconds;
        out.total_cpu_time_seconds += u.total_cpu_time_seconds;
        out.total_energy_kwh += u.total_energy_kwh;
        out.cpu_energy_kwh += u.cpu_energy_kwh;
        out.dram_energy_kwh += u.dram_energy_kwh;
        out.network_energy_kwh += u.network_energy_kwh;
        out.total_emissions_grams += u.total_emissions_grams;
        cpu_w += u.avg_cpu_usage_fraction * u.wall_seconds;
        mem_w += u.avg_memory_usage_fraction * u.wall_seconds;
        if let Some(g) = u.avg_gpu_usage_fraction {
            gpu_w += g * u.wall_seconds;
            gpu_wall += u.wall_seconds;
        }
    }
    if out.wall_seconds > 0.0 {
        out.avg_cpu_usage_fraction = cpu_w / out.wall_seconds;
        out.avg_memory_usage_fraction = mem_w / out.wall_seconds;
    }
    if gpu_wall > 0.0 {
        out.avg_gpu_usage_fraction = Some(gpu_w / gpu_wall);
    }
    out.no_data = units.iter().all(|u| u.no_data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use wattline_core::workload::ResourceManager;

    fn unit(start: i64, end: Option<i64>) -> WorkloadUnit {
        WorkloadUnit {
            uuid: "7".into(),
            cluster_id: "c".into(),
            resource_manager: ResourceManager::Slurm,
            user: "alice".into(),
            project: "p".into(),
            created_at_ms: start,
            started_at_ms: start,
            ended_at_ms: end,
            alloc_cpus: 2,
            alloc_memory_bytes: 4_000,
            gpu_indices: vec![],
        }
    }

    fn flat(watts: f64, from: i64, to: i64, step: i64) -> Vec<PowerRow> {
        (from..=to)
            .step_by(step as usize)
            .map(|t| PowerRow {
                timestamp_ms: t,
                watts,
                cpu_watts: watts * 0.5,
                dram_watts: watts * 0.4,
                network_watts: watts * 0.1,
            })
            .collect()
    }

    fn series(points: Vec<(i64, f64)>) -> RangeSeries {
        RangeSeries {
            labels: BTreeMap::new(),
            points,
        }
    }

    #[test]
    fn constant_hundred_watts_for_an_hour() {
        let samples = UnitSamples {
            power: flat(100.0, 0, 3_600_000, 15_000),
            ..Default::default()
        };
        let factors = FactorHistory::new(vec![(0, 50.0), (1_800_000, 100.0)]);
        let m = aggregate_unit(&unit(0, Some(3_600_000)), &samples, &factors, 5_000_000).unwrap();
        assert!((m.total_energy_kwh - 0.1).abs() < 1e-12);
        assert!((m.cpu_energy_kwh - 0.05).abs() < 1e-12);
        assert!((m.total_emissions_grams - (0.05 * 50.0 + 0.05 * 100.0)).abs() < 1e-9);
        assert!(!m.no_data);
        assert_eq!(m.wall_seconds, 3600.0);
    }

    #[test]
    fn no_series_is_flagged() {
        let m = aggregate_unit(
            &unit(0, Some(10)),
            &UnitSamples::default(),
            &FactorHistory::default(),
            20,
        )
        .unwrap();
        assert!(m.no_data);
        assert_eq!(m.total_energy_kwh, 0.0);
    }

    #[test]
    fn usage_fractions() {
        let samples = UnitSamples {
            power: flat(10.0, 15_000, 60_000, 15_000),
            cpu: vec![series(vec![(0, 0.0), (30_000, 45.0), (60_000, 90.0)])],
            memory: vec![series(vec![(0, 1_000.0), (60_000, 3_000.0)])],
            gpu_utilization: vec![0.5],
        };
        let m = aggregate_unit(&unit(0, Some(60_000)), &samples, &FactorHistory::default(), 60_000).unwrap();
        assert_eq!(m.total_cpu_time_seconds, 90.0);
        assert_eq!(m.avg_cpu_usage_fraction, 0.75);
        assert_eq!(m.avg_memory_usage_fraction, 0.5);
        assert_eq!(m.avg_gpu_usage_fraction, None);
        assert_eq!(m.total_emissions_grams, 0.0);
    }

    #[test]
    fn counter_restarts() {
        assert_eq!(
            counter_increase(&[(0, 5.0), (1, 8.0), (2, 2.0), (3, 4.0)]),
            3.0 + 2.0 + 2.0
        );
        assert_eq!(counter_increase(&[(0, 5.0)]), 0.0);
    }

    #[test]
    fn combine_sums_and_weights() {
        let mut a = AggregateMetrics::zero(Scope::Unit, "1", 0, 10);
        a.total_energy_kwh = 0.1;
        a.wall_seconds = 100.0;
        a.avg_cpu_usage_fraction = 1.0;
        let mut b = AggregateMetrics::zero(Scope::Unit, "2", 0, 10);
        b.total_energy_kwh = 0.2;
        b.wall_seconds = 300.0;
        b.avg_cpu_usage_fraction = 0.2;
        b.avg_gpu_usage_fraction = Some(0.4);
        let u = combine(Scope::User, "alice", 0, 10, &[a, b]);
        assert!((u.total_energy_kwh - 0.3).abs() < 1e-15);
        assert!((u.avg_cpu_usage_fraction - 0.4).abs() < 1e-15);
        assert_eq!(u.avg_gpu_usage_fraction, Some(0.4));
        let empty = combine(Scope::Project, "none", 0, 10, &[]);
        assert!(empty.no_data);
        assert_eq!(empty.total_energy_kwh, 0.0);
    }
}
