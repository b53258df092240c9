//! Node exporter: workload cgroup accounting, RAPL counters, IPMI-DCMI node
//! power and GPU maps, read from a filesystem prefix and served as text
//! exposition.

pub mod cgroup;
pub mod exporter;
pub mod fs;
pub mod gpu;
pub mod ipmi;
pub mod rapl;
pub mod server;

pub use cgroup::{collect_cgroup_usage, Layout, UsageSample};
pub use exporter::{CollectorSet, Exporter, ExporterConfig};
pub use fs::{FsSource, MemFs, OsFs};
pub use gpu::{collect_gpu_map, GpuMapEntry};
pub use ipmi::{parse_dcmi, IpmiReader, NodePowerReading};
pub use rapl::read_energy_counters;
pub use wattline_core::counter::counter_delta;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CollectError {
    #[error("source unavailable: {0}")]
    Source(String),
    #[error("parse failure: {0}")]
    Parse(String),
}
