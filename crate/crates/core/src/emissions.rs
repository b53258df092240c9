//! Emission factors and energy to CO₂-equivalent conversion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorProvider {
    Static,
    Realtime,
}

impl fmt::Display for FactorProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorProvider::Static => "static",
            FactorProvider::Realtime => "realtime",
        })
    }
}

/// Grams of CO₂-equivalent per kWh for a region at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionFactor<S> {
    pub region: String,
    pub grams_per_kwh: S,
    pub timestamp_ms: i64,
    pub provider: FactorProvider,
}

#[derive(Debug, Error)]
pub enum EmissionsError {
    #[error("`{field}` must be finite and non-negative, got {value}")]
    InvalidInput { field: &'static str, value: f64 },
    #[error("unknown region `{region}`; known regions: {}", known.join(", "))]
    UnknownRegion { region: String, known: Vec<String> },
    #[error("factor table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("reading factor table: {0}")]
    Io(#[from] std::io::Error),
    #[error("no emission factor available for `{region}`: {reason}")]
    Unavailable { region: String, reason: String },
}

/// Grams of CO₂-equivalent emitted by `energy_kwh` at the given factor.
pub fn compute_emissions<S: Scalar>(energy_kwh: S, factor: &EmissionFactor<S>) -> Result<S, EmissionsError> {
    for (field, v) in [("energy_kwh", energy_kwh), ("grams_per_kwh", factor.grams_per_kwh)] {
        if !v.is_finite() || v < S::zero() {
            return Err(EmissionsError::InvalidInput {
                field,
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(energy_kwh * factor.grams_per_kwh)
}

/// Static per-region factors loaded from a `region,grams_per_kwh` file.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFactorTable {
    rows: BTreeMap<String, f64>,
    loaded_at_ms: i64,
}

impl StaticFactorTable {
    pub fn parse(text: &str, loaded_at_ms: i64) -> Result<Self, EmissionsError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| EmissionsError::Table {
            line: 1,
            message: e.to_string(),
        })?;
        if headers.len() != 2 || &headers[0] != "region" || &headers[1] != "grams_per_kwh" {
            return Err(EmissionsError::Table {
                line: 1,
                message: "expected header `region,grams_per_kwh`".into(),
            });
        }
        let mut rows = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| EmissionsError::Table {
                line,
                message: e.to_string(),
            })?;
            if record.len() != 2 {
                return Err(EmissionsError::Table {
                    line,
                    message: format!("expected 2 fields, found {}", record.len()),
                });
            }
            let region = record[0].to_string();
            if region.is_empty() {
                return Err(EmissionsError::Table {
                    line,
                    message: "empty region".into(),
                });
            }
            let grams: f64 = record[1].parse().map_err(|_| EmissionsError::Table {
                line,
                message: format!("invalid factor `{}`", &record[1]),
            })?;
            if !grams.is_finite() || grams < 0.0 {
                return Err(EmissionsError::Table {
                    line,
                    message: format!("factor must be finite and non-negative, got {grams}"),
                });
            }
            if rows.insert(region.clone(), grams).is_some() {
                return Err(EmissionsError::Table {
                    line,
                    message: format!("duplicate region `{region}`"),
                });
            }
        }
        Ok(Self { rows, loaded_at_ms })
    }

    pub fn load(path: &Path, loaded_at_ms: i64) -> Result<Self, EmissionsError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, loaded_at_ms)
    }

    pub fn lookup(&self, region: &str) -> Result<EmissionFactor<f64>, EmissionsError> {
        match self.rows.get(region) {
            Some(&grams) => Ok(EmissionFactor {
                region: region.to_string(),
                grams_per_kwh: grams,
                timestamp_ms: self.loaded_at_ms,
                provider: FactorProvider::Static,
            }),
            None => Err(EmissionsError::UnknownRegion {
                region: region.to_string(),
                known: self.rows.keys().cloned().collect(),
            }),
        }
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }
}

/// Per-region cache of fetched factors. An entry is fresh while
/// `now - fetched_at < ttl`.
#[derive(Debug)]
pub struct FactorCache {
    ttl_ms: i64,
    entries: RwLock<HashMap<String, EmissionFactor<f64>>>,
}

impl FactorCache {
    pub fn new(ttl_ms: i64) -> Self {
        Self {
            ttl_ms,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn ttl_ms(&self) -> i64 {
        self.ttl_ms
    }

    pub fn get_fresh(&self, region: &str, now_ms: i64) -> Option<EmissionFactor<f64>> {
        let entries = self.entries.read().unwrap_or_else(|e| e.into_inner());
        entries
            .get(region)
            .filter(|f| now_ms - f.timestamp_ms < self.ttl_ms && now_ms >= f.timestamp_ms)
            .cloned()
    }

    /// Stores a factor; its `timestamp_ms` is taken as the fetch time.
    pub fn insert(&self, factor: EmissionFactor<f64>) {
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        entries.insert(factor.region.clone(), factor);
    }
}

/// Time-ordered factor readings for one region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorHistory {
    points: Vec<(i64, f64)>,
}

impl FactorHistory {
    pub fn new(mut points: Vec<(i64, f64)>) -> Self {
        points.sort_by_key(|p| p.0);
        points.dedup_by_key(|p| p.0);
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The latest factor recorded at or before `t`, or the earliest one when
    /// `t` precedes the whole history.
    pub fn factor_at(&self, t_ms: i64) -> Option<f64> {
        let idx = self.points.partition_point(|p| p.0 <= t_ms);
        if idx == 0 {
            self.points.first().map(|p| p.1)
        } else {
            Some(self.points[idx - 1].1)
        }
    }
}
