//! Gate configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use wattline_core::auth::BasicCredential;

use crate::pool::Strategy;

/// Where ownership is checked: the registry API or its database file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnershipConfig {
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub database: Option<PathBuf>,
    #[serde(default)]
    pub username: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub cluster_id: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Private listener for series deletion; absent disables it.
    #[serde(default)]
    pub admin_listen: Option<String>,
    pub backends: Vec<String>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_id_label")]
    pub id_label: String,
    pub registry: OwnershipConfig,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    #[serde(default = "default_health_interval")]
    pub health_interval_seconds: u64,
    /// Metric names readable without a workload selector.
    #[serde(default)]
    pub allowlist: Vec<String>,
    #[serde(default)]
    pub users: Vec<BasicCredential>,
}

fn default_listen() -> String {
    "127.0.0.1:9030".into()
}

fn default_id_label() -> String {
    "workload_id".into()
}

fn default_timeout() -> u64 {
    30
}

fn default_health_interval() -> u64 {
    10
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cluster_id.is_empty() {
            return Err("gate.cluster_id must be non-empty".into());
        }
        if self.backends.is_empty() {
            return Err("gate.backends must list at least one backend".into());
        }
        for b in &self.backends {
            url::Url::parse(b).map_err(|e| format!("gate.backends `{b}`: {e}"))?;
        }
        if self.id_label.is_empty() {
            return Err("gate.id_label must be non-empty".into());
        }
        match (&self.registry.url, &self.registry.database) {
            (None, None) => return Err("gate.registry needs `url` or `database`".into()),
            (Some(u), _) => {
                url::Url::parse(u).map_err(|e| format!("gate.registry.url `{u}`: {e}"))?;
            }
            _ => {}
        }
        if self.registry.username.is_some() != self.registry.password.is_some() {
            return Err("gate.registry.username and password go together".into());
        }
        if self.timeout_seconds == 0 || self.health_interval_seconds == 0 {
            return Err("gate timeouts and intervals must be positive".into());
        }
        Ok(())
    }
}
