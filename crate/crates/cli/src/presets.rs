//! Built-in hardware profiles for rule generation.

use wattline_core::{Profile, RaplDomain};

pub const PRESETS: [&str; 3] = ["cpu-dram", "cpu-only", "gpu-ipmi"];

/// `cpu-dram`: package and DRAM RAPL; `cpu-only`: package RAPL only;
/// `gpu-ipmi`: package and DRAM RAPL with GPU draw inside the IPMI reading.
pub fn preset(name: &str) -> Option<Profile> {
    match name {
        "cpu-dram" => Some(Profile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], false)),
        "cpu-only" => Some(Profile::new(&[RaplDomain::CpuPackage], false)),
        "gpu-ipmi" => Some(Profile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], true)),
        _ => None,
    }
}
