//! Workload registry: ingests accounting rows into a unified schema,
//! attributes node power to workloads from raw TSDB series, aggregates
//! energy, usage and emissions per unit, user and project, purges the
//! series of short workloads, answers ownership queries and snapshots
//! its store.

pub mod aggregate;
pub mod api;
pub mod attribute;
pub mod backup;
pub mod config;
pub mod purge;
pub mod registry;
pub mod store;
pub mod tsdb;

use std::path::Path;

pub use aggregate::{aggregate_unit, combine, UnitSamples};
pub use attribute::{attribute_node, ProfileMatcher};
pub use backup::BackupSchedule;
pub use config::RegistryConfig;
pub use registry::{AccountingSource, CycleOptions, CycleReport, FileSource, Registry};
pub use store::{PowerRow, Store, StoredUnit, UnitFilter};
pub use tsdb::{HttpTsdb, RangeSeries, TsdbClient};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("store: {0}")]
    Store(String),
    #[error("tsdb: {0}")]
    Tsdb(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("energy: {0}")]
    Energy(#[from] wattline_core::energy::EnergyError),
}

impl RegistryError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RegistryError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
