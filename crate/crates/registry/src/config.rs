//! Registry configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use wattline_core::auth::BasicCredential;
use wattline_core::rules::NamedProfile;
use wattline_emissions::EmissionsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsdbConfig {
    pub url: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    /// Attempts per request before the run fails.
    #[serde(default = "default_attempts")]
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackupConfig {
    pub dir: PathBuf,
    #[serde(default = "default_backup_interval")]
    pub interval_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryConfig {
    pub cluster_id: String,
    pub database: PathBuf,
    /// Accounting export of the resource manager, re-read every ingest.
    pub accounting_file: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_ingest_interval")]
    pub ingest_interval_seconds: u64,
    #[serde(default = "default_aggregation_interval")]
    pub aggregation_interval_seconds: u64,
    /// Ended units shorter than this lose their TSDB series; 0 disables.
    #[serde(default = "default_cutoff")]
    pub cutoff_seconds: u64,
    /// Delay after a unit ends before its aggregate is made final.
    #[serde(default = "default_settle")]
    pub settle_seconds: u64,
    /// How far back attribution starts on a node seen for the first time.
    #[serde(default = "default_lookback")]
    pub initial_lookback_seconds: u64,
    pub tsdb: TsdbConfig,
    #[serde(default)]
    pub backup: Option<BackupConfig>,
    #[serde(default)]
    pub emissions: Option<EmissionsConfig>,
    pub profiles: Vec<NamedProfile>,
    #[serde(default)]
    pub users: Vec<BasicCredential>,
}

fn default_timeout() -> u64 {
    30
}

fn default_attempts() -> u32 {
    3
}

fn default_backup_interval() -> u64 {
    3600
}

fn default_listen() -> String {
    "127.0.0.1:9020".into()
}

fn default_ingest_interval() -> u64 {
    300
}

fn default_aggregation_interval() -> u64 {
    900
}

fn default_cutoff() -> u64 {
    60
}

fn default_settle() -> u64 {
    60
}

fn default_lookback() -> u64 {
    3600
}

impl RegistryConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cluster_id.is_empty() {
            return Err("registry.cluster_id must be non-empty".into());
        }
        if self.profiles.is_empty() {
            return Err("registry.profiles must list at least one hardware profile".into());
        }
        for p in &self.profiles {
            p.profile().validate().map_err(|e| format!("profile {}: {e}", p.name))?;
        }
        if self.ingest_interval_seconds == 0 || self.aggregation_interval_seconds == 0 {
            return Err("registry intervals must be positive".into());
        }
        if let Some(b) = &self.backup {
            if b.interval_seconds == 0 {
                return Err("registry.backup.interval_seconds must be positive".into());
            }
        }
        url::Url::parse(&self.tsdb.url).map_err(|e| format!("registry.tsdb.url `{}`: {e}", self.tsdb.url))?;
        if let Some(e) = &self.emissions {
            e.validate()?;
        }
        Ok(())
    }
}
