//! Synthetic cluster for hardware-free end-to-end runs: a seeded workload
//! and power generator, per-node fixture trees, a mock TSDB that filters
//! by label matchers, a scrape driver and a mock emission-factor endpoint.

pub mod cluster;
pub mod factors;
pub mod fuzz;
pub mod manifest;
pub mod scrape;
pub mod simfs;
pub mod spec;
pub mod trace;
pub mod truth;
pub mod tsdb;

use std::path::Path;

pub use cluster::SimCluster;
pub use factors::FactorServer;
pub use fuzz::{FuzzQuery, QueryFuzzer};
pub use scrape::{ScrapeDriver, ScrapeOptions, ScrapeReport, Sink, Target};
pub use simfs::SimFs;
pub use spec::{ClusterSpec, GroupSpec};
pub use trace::{generate, Trace};
pub use truth::validate_trace;
pub use tsdb::MockTsdb;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cluster spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("targets line {line}: {message}")]
    Targets { line: usize, message: String },
}

impl SimError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Files written by [`generate_cluster`].
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ACCOUNTING_FILE: &str = "accounting.txt";
pub const FACTORS_FILE: &str = "factors.csv";

/// Generates the trace and writes the manifest, the final accounting
/// export, a static factor table (the mean of the hourly factors) and
/// fixture trees `nodes/<instance>/<instant>/` every `fixture_stride`
/// instants (the last instant is always included).
pub fn generate_cluster(spec: &ClusterSpec, out: &Path, fixture_stride: usize) -> Result<Trace, SimError> {
    let trace = trace::generate(spec)?;
    std::fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    manifest::write_manifest(&trace, &out.join(MANIFEST_FILE))?;
    let accounting = out.join(ACCOUNTING_FILE);
    std::fs::write(&accounting, trace.accounting_as_of(i64::MAX)).map_err(|e| SimError::io(&accounting, e))?;
    let mean = trace.hourly_factors.iter().sum::<f64>() / trace.hourly_factors.len() as f64;
    let factors = out.join(FACTORS_FILE);
    std::fs::write(
        &factors,
        format!(
            "region,grams_per_kwh\n{},{}\n",
            spec.region,
            (mean * 100.0).round() / 100.0
        ),
    )
    .map_err(|e| SimError::io(&factors, e))?;

    let shared = std::sync::Arc::new(trace);
    let stride = fixture_stride.max(1);
    let mut instants: Vec<usize> = (0..=shared.last_instant).step_by(stride).collect();
    if instants.last() != Some(&shared.last_instant) {
        instants.push(shared.last_instant);
    }
    for (n, node) in shared.nodes.iter().enumerate() {
        for &k in &instants {
            let dest = out.join("nodes").join(&node.instance).join(format!("{k:05}"));
            let fs = SimFs::at_instant(shared.clone(), n, k);
            simfs::write_tree(&fs, &dest).map_err(|e| SimError::io(&dest, e))?;
        }
    }
    Ok(std::sync::Arc::try_unwrap(shared).unwrap_or_else(|a| (*a).clone()))
}
