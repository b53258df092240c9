//! Backend selection with exact in-flight accounting.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::GateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    RoundRobin,
    LeastConnection,
}

#[derive(Debug)]
pub struct Backend {
    pub url: String,
    healthy: AtomicBool,
    in_flight: AtomicUsize,
}

impl Backend {
    pub fn healthy(&self) -> bool {
        self.healthy.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct BackendPool {
    backends: Vec<Backend>,
    strategy: Strategy,
    cursor: AtomicUsize,
}

/// A selected backend; dropping it ends the request.
#[derive(Debug)]
pub struct Lease {
    pool: Arc<BackendPool>,
    index: usize,
}

impl Lease {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn url(&self) -> &str {
        &self.pool.backends[self.index].url
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.pool.backends[self.index].in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl BackendPool {
    pub fn new(urls: &[String], strategy: Strategy) -> Result<Self, GateError> {
        if urls.is_empty() {
            return Err(GateError::Config("at least one backend is required".into()));
        }
        Ok(Self {
            backends: urls
                .iter()
                .map(|u| Backend {
                    url: u.trim_end_matches('/').to_string(),
                    healthy: AtomicBool::new(true),
                    in_flight: AtomicUsize::new(0),
                })
                .collect(),
            strategy,
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn set_healthy(&self, index: usize, healthy: bool) {
        self.backends[index].healthy.store(healthy, Ordering::SeqCst);
    }

    pub fn total_in_flight(&self) -> usize {
        self.backends.iter().map(Backend::in_flight).sum()
    }

    pub fn select(self: &Arc<Self>) -> Result<Lease, GateError> {
        let n = self.backends.len();
        let index = match self.strategy {
            Strategy::RoundRobin => {
                let healthy: Vec<usize> = (0..n).filter(|&i| self.backends[i].healthy()).collect();
                if healthy.is_empty() {
                    return Err(GateError::NoHealthyBackend);
                }
                healthy[self.cursor.fetch_add(1, Ordering::SeqCst) % healthy.len()]
            }
            Strategy::LeastConnection => (0..n)
                .filter(|&i| self.backends[i].healthy())
                .min_by_key(|&i| (self.backends[i].in_flight(), i))
                .ok_or(GateError::NoHealthyBackend)?,
        };
        self.backends[index].in_flight.fetch_add(1, Ordering::SeqCst);
        Ok(Lease {
            pool: self.clone(),
            index,
        })
    }
}
