//! RAPL energy counters and wrap-aware deltas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::RaplDomain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCounter {
    pub domain: RaplDomain,
    pub socket: u32,
    pub energy_uj: f64,
    pub max_range_uj: f64,
    pub timestamp_ms: i64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterError {
    #[error("counters belong to different domains: {0}/{1} vs {2}/{3}")]
    Mismatch(RaplDomain, u32, RaplDomain, u32),
    #[error("current reading ({curr} ms) is not after previous reading ({prev} ms)")]
    NotLater { prev: i64, curr: i64 },
}

/// Energy consumed between two readings of a counter that wraps at `max_range`.
///
/// At most one wrap is assumed between readings. With 60 s scrapes that
/// holds as long as the domain draws less than `max_range / 60` µJ/s (a
/// 262 kJ range allows roughly 4.3 kW).
pub fn wrapping_delta(prev: f64, curr: f64, max_range: f64) -> f64 {
    if curr >= prev {
        curr - prev
    } else {
        (max_range - prev + curr).max(0.0)
    }
}

pub fn counter_delta(prev: &EnergyCounter, curr: &EnergyCounter) -> Result<f64, CounterError> {
    if prev.domain != curr.domain || prev.socket != curr.socket {
        return Err(CounterError::Mismatch(
            prev.domain,
            prev.socket,
            curr.domain,
            curr.socket,
        ));
    }
    if curr.timestamp_ms <= prev.timestamp_ms {
        return Err(CounterError::NotLater {
            prev: prev.timestamp_ms,
            curr: curr.timestamp_ms,
        });
    }
    Ok(wrapping_delta(prev.energy_uj, curr.energy_uj, curr.max_range_uj))
}
