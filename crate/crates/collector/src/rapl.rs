//! RAPL energy counters from a powercap tree.

use wattline_core::{EnergyCounter, RaplDomain};

use crate::fs::{join, FsSource};

pub const POWERCAP_ROOT: &str = "sys/class/powercap";
const ZONE_PREFIX: &str = "intel-rapl:";
/// Used when a zone does not publish its range (typical package value).
const DEFAULT_MAX_RANGE_UJ: u64 = 262_143_328_850;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaplReport {
    pub counters: Vec<EnergyCounter>,
    /// False when no powercap tree exists on this node.
    pub available: bool,
}

/// Reads every package and dram zone. Nodes without a tree are legal and
/// yield an empty, unavailable report.
pub fn read_energy_counters(fs: &dyn FsSource, timestamp_ms: i64) -> RaplReport {
    let mut zones: Vec<(String, String)> = Vec::new();
    for dir in [POWERCAP_ROOT.to_string(), join(POWERCAP_ROOT, "intel-rapl")] {
        if let Ok(entries) = fs.read_dir(&dir) {
            for e in entries {
                if e.is_dir && is_top_zone(&e.name) && !zones.iter().any(|z| z.0 == e.name) {
                    zones.push((e.name.clone(), join(&dir, &e.name)));
                }
            }
        }
    }
    if zones.is_empty() {
        return RaplReport::default();
    }
    zones.sort();

    let mut counters = Vec::new();
    for (name, path) in &zones {
        let Some(socket) = name[ZONE_PREFIX.len()..].parse::<u32>().ok() else {
            continue;
        };
        let zone_name = read_trimmed(fs, &join(path, "name"));
        // A package zone is named `package-N`; fixtures may omit the name.
        if zone_name.as_deref().is_none_or(|n| n.starts_with("package")) {
            if let Some(c) = read_counter(fs, path, RaplDomain::CpuPackage, socket, timestamp_ms) {
                counters.push(c);
            }
        }
        let Ok(children) = fs.read_dir(path) else {
            continue;
        };
        for child in children
            .iter()
            .filter(|c| c.is_dir && c.name.starts_with(name.as_str()))
        {
            let sub = join(path, &child.name);
            if read_trimmed(fs, &join(&sub, "name")).as_deref() == Some("dram") {
                if let Some(c) = read_counter(fs, &sub, RaplDomain::Dram, socket, timestamp_ms) {
                    counters.push(c);
                }
            }
        }
    }
    RaplReport {
        counters,
        available: true,
    }
}

fn is_top_zone(name: &str) -> bool {
    name.strip_prefix(ZONE_PREFIX)
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

fn read_trimmed(fs: &dyn FsSource, path: &str) -> Option<String> {
    fs.read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn read_counter(
    fs: &dyn FsSource,
    dir: &str,
    domain: RaplDomain,
    socket: u32,
    timestamp_ms: i64,
) -> Option<EnergyCounter> {
    let energy_uj: u64 = read_trimmed(fs, &join(dir, "energy_uj"))?.parse().ok()?;
    let max_range_uj: u64 = read_trimmed(fs, &join(dir, "max_energy_range_uj"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_MAX_RANGE_UJ)
        .max(energy_uj);
    Some(EnergyCounter {
        domain,
        socket,
        energy_uj: energy_uj as f64,
        max_range_uj: max_range_uj as f64,
        timestamp_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fs::MemFs;

    #[test]
    fn single_package_zone() {
        let mut fs = MemFs::new();
        fs.insert("sys/class/powercap/intel-rapl:0/energy_uj", "1000000\n");
        let r = read_energy_counters(&fs, 0);
        assert!(r.available);
        assert_eq!(r.counters.len(), 1);
        assert_eq!(r.counters[0].domain, RaplDomain::CpuPackage);
        assert_eq!(r.counters[0].socket, 0);
        assert_eq!(r.counters[0].energy_uj, 1e6);
    }

    #[test]
    fn two_sockets_with_dram() {
        let mut fs = MemFs::new();
        for s in 0..2 {
            let p = format!("sys/class/powercap/intel-rapl/intel-rapl:{s}");
            fs.insert(&format!("{p}/name"), format!("package-{s}\n"))
                .insert(&format!("{p}/energy_uj"), "10")
                .insert(&format!("{p}/max_energy_range_uj"), "262143328850")
                .insert(&format!("{p}/intel-rapl:{s}:0/name"), "core")
                .insert(&format!("{p}/intel-rapl:{s}:0/energy_uj"), "3")
                .insert(&format!("{p}/intel-rapl:{s}:1/name"), "dram")
                .insert(&format!("{p}/intel-rapl:{s}:1/energy_uj"), "5")
                .insert(&format!("{p}/intel-rapl:{s}:1/max_energy_range_uj"), "65712999613");
        }
        fs.insert("sys/class/powercap/intel-rapl:2/name", "psys")
            .insert("sys/class/powercap/intel-rapl:2/energy_uj", "7");
        let r = read_energy_counters(&fs, 0);
        assert_eq!(r.counters.len(), 4);
        let dram: Vec<_> = r.counters.iter().filter(|c| c.domain == RaplDomain::Dram).collect();
        assert_eq!(dram.len(), 2);
        assert_eq!(dram[1].socket, 1);
        assert_eq!(dram[1].max_range_uj, 65_712_999_613.0);
    }

    #[test]
    fn absent_tree() {
        let r = read_energy_counters(&MemFs::new(), 0);
        assert!(!r.available);
        assert!(r.counters.is_empty());
    }
}
