//! Workload to GPU maps and per-device GPU readings from fixture files.
//!
//! `gpu/map` rows: `workload_id gpu_index gpu_uuid`.
//! `gpu/devices` rows: `gpu_index gpu_uuid power_watts utilization_ratio`.

use std::collections::BTreeSet;

use crate::fs::FsSource;

pub const GPU_MAP_PATH: &str = "gpu/map";
pub const GPU_DEVICES_PATH: &str = "gpu/devices";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuMapEntry {
    pub workload_id: String,
    pub gpu_index: u32,
    pub gpu_uuid: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuDevice {
    pub gpu_index: u32,
    pub gpu_uuid: String,
    pub power_watts: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpuReport {
    pub entries: Vec<GpuMapEntry>,
    pub devices: Vec<GpuDevice>,
    /// Malformed or duplicate rows dropped.
    pub skipped: usize,
}

/// Parses map rows. The first row wins for a repeated (workload, index).
pub fn parse_gpu_map(text: &str) -> (Vec<GpuMapEntry>, usize) {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    let mut skipped = 0;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [id, idx, uuid] => idx.parse::<u32>().ok().map(|idx| GpuMapEntry {
                workload_id: id.to_string(),
                gpu_index: idx,
                gpu_uuid: uuid.to_string(),
            }),
            _ => None,
        };
        match parsed {
            Some(e) if seen.insert((e.workload_id.clone(), e.gpu_index)) => entries.push(e),
            _ => {
                tracing::warn!(row = line, "dropping GPU map row");
                skipped += 1;
            }
        }
    }
    (entries, skipped)
}

pub fn parse_gpu_devices(text: &str) -> (Vec<GpuDevice>, usize) {
    let mut devices = Vec::new();
    let mut skipped = 0;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [idx, uuid, power, util] => (|| {
                let power: f64 = power.parse().ok()?;
                let util: f64 = util.parse().ok()?;
                (power.is_finite() && power >= 0.0 && util.is_finite() && util >= 0.0).then(|| {
                    Some(GpuDevice {
                        gpu_index: idx.parse().ok()?,
                        gpu_uuid: uuid.to_string(),
                        power_watts: power,
                        utilization: util,
                    })
                })?
            })(),
            _ => None,
        };
        match parsed {
            Some(d) if !devices.iter().any(|x: &GpuDevice| x.gpu_index == d.gpu_index) => devices.push(d),
            _ => skipped += 1,
        }
    }
    (devices, skipped)
}

/// Missing files mean no GPUs.
pub fn collect_gpu_map(fs: &dyn FsSource) -> GpuReport {
    let (entries, s1) = fs
        .read_to_string(GPU_MAP_PATH)
        .map(|t| parse_gpu_map(&t))
        .unwrap_or_default();
    let (devices, s2) = fs
        .read_to_string(GPU_DEVICES_PATH)
        .map(|t| parse_gpu_devices(&t))
        .unwrap_or_default();
    GpuReport {
        entries,
        devices,
        skipped: s1 + s2,
    }
}
