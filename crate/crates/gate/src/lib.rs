//! Ownership-enforcing reverse proxy in front of one or more TSDB
//! backends. A query is forwarded only when every selector in it is bound
//! to workloads the requesting user owns; everything else is denied.

pub mod authorize;
pub mod config;
pub mod inspect;
pub mod pool;
pub mod proxy;

pub use authorize::{authorize, Decision, DenyReason, Ownership, RegistryHttp, StoreOwnership};
pub use config::{GateConfig, OwnershipConfig};
pub use inspect::{extract_workload_ids, QueryInspection};
pub use pool::{BackendPool, Lease, Strategy};
pub use proxy::{Gate, GateStats, USER_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("config: {0}")]
    Config(String),
    #[error("registry: {0}")]
    Registry(String),
    #[error("no healthy backend")]
    NoHealthyBackend,
}
