//! Selection of short workloads whose series are removed from the TSDB.

use wattline_core::WorkloadUnit;

/// Series selector covering every series of a workload.
pub fn workload_selector(uuid: &str) -> String {
    let escaped = uuid.replace('\\', "\\\\").replace('"', "\\\"");
    format!("{{workload_id=\"{escaped}\"}}")
}

/// True for ended units that lasted less than `cutoff_s`. A zero cutoff
/// never purges and running units are never purged.
pub fn is_short(unit: &WorkloadUnit, cutoff_s: u64) -> bool {
    match unit.ended_at_ms {
        Some(end) => cutoff_s > 0 && end - unit.started_at_ms < cutoff_s as i64 * 1000,
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use wattline_core::workload::ResourceManager;

    fn unit(start: i64, end: Option<i64>) -> WorkloadUnit {
        WorkloadUnit {
            uuid: "42".into(),
            cluster_id: "c".into(),
            resource_manager: ResourceManager::Slurm,
            user: "u".into(),
            project: "p".into(),
            created_at_ms: start,
            started_at_ms: start,
            ended_at_ms: end,
            alloc_cpus: 1,
            alloc_memory_bytes: 1,
            gpu_indices: vec![],
        }
    }

    #[test]
    fn thirty_seconds_under_a_minute_cutoff() {
        let u = unit(0, Some(30_000));
        assert!(is_short(&u, 60));
        assert_eq!(workload_selector(&u.uuid), r#"{workload_id="42"}"#);
        assert!(!is_short(&u, 0));
        assert!(!is_short(&unit(0, Some(60_000)), 60));
        assert!(!is_short(&unit(0, None), 60));
        assert_eq!(workload_selector(r#"a"b"#), r#"{workload_id="a\"b"}"#);
    }

    proptest! {
        #[test]
        fn never_purges_long_units(start in 0i64..1_000_000_000, dur_ms in 0i64..10_000_000, cutoff in 0u64..10_000) {
            let u = unit(start, Some(start + dur_ms));
            if is_short(&u, cutoff) {
                prop_assert!(dur_ms < cutoff as i64 * 1000);
            } else {
                prop_assert!(cutoff == 0 || dur_ms >= cutoff as i64 * 1000);
            }
        }
    }
}
