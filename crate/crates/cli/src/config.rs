//! One YAML file for the whole stack; each service reads its section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wattline_collector::ExporterConfig;
use wattline_core::auth::BasicCredential;
use wattline_emissions::EmissionsConfig;
use wattline_gate::GateConfig;
use wattline_registry::RegistryConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Basic-auth users for every service that has none of its own.
    #[serde(default)]
    pub users: Vec<BasicCredential>,
    #[serde(default)]
    pub exporter: Option<ExporterConfig>,
    #[serde(default)]
    pub registry: Option<RegistryConfig>,
    #[serde(default)]
    pub gate: Option<GateConfig>,
    /// Factor providers for the registry when its section has none.
    #[serde(default)]
    pub emissions: Option<EmissionsConfig>,
}

fn default_log_level() -> String {
    "info".into()
}

const LOG_LEVELS: [&str; 5] = ["trace", "debug", "info", "warn", "error"];

impl StackConfig {
    /// Parses YAML; errors carry the path to the offending key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = serde_yaml::Deserializer::from_str(text);
        let mut cfg: StackConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(if path == "." {
                e.inner().to_string()
            } else {
                format!("{path}: {}", e.inner())
            })
        })?;
        if let Some(r) = cfg.registry.as_mut() {
            if r.emissions.is_none() {
                r.emissions = cfg.emissions.clone();
            }
            if r.users.is_empty() {
                r.users = cfg.users.clone();
            }
        }
        if let Some(g) = cfg.gate.as_mut() {
            if g.users.is_empty() {
                g.users = cfg.users.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a file. Creates nothing and opens no sockets.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !LOG_LEVELS.contains(&self.log_level.as_str()) {
            return Err(CliError::Config(format!(
                "log_level `{}` is not one of {}",
                self.log_level,
                LOG_LEVELS.join(", ")
            )));
        }
        let checks = [
            self.exporter.as_ref().map(ExporterConfig::validate),
            self.registry.as_ref().map(RegistryConfig::validate),
            self.gate.as_ref().map(GateConfig::validate),
            self.emissions.as_ref().map(EmissionsConfig::validate),
        ];
        for r in checks.into_iter().flatten() {
            r.map_err(CliError::Config)?;
        }
        Ok(())
    }

    pub fn exporter(&self) -> Result<&ExporterConfig, CliError> {
        self.exporter.as_ref().ok_or(CliError::MissingSection("exporter"))
    }

    pub fn registry(&self) -> Result<&RegistryConfig, CliError> {
        self.registry.as_ref().ok_or(CliError::MissingSection("registry"))
    }

    pub fn gate(&self) -> Result<&GateConfig, CliError> {
        self.gate.as_ref().ok_or(CliError::MissingSection("gate"))
    }

    /// The config with defaults filled in, as YAML.
    pub fn normalized(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// [`Self::normalized`] with plaintext secrets masked, for display.
    pub fn redacted(&self) -> String {
        let mut c = self.clone();
        if let Some(g) = c.gate.as_mut() {
            if g.registry.password.is_some() {
                g.registry.password = Some("<redacted>".into());
            }
        }
        c.normalized()
    }
}
