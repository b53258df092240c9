//! Core building blocks shared by every wattline service.
//!
//! The numeric parts (power attribution, energy integration, emission
//! conversion) are generic over [`Scalar`] so they run in `f32` or `f64`.
//! The services use the `f64` aliases exported at the crate root.

pub mod attribution;
pub mod auth;
pub mod clock;
pub mod counter;
pub mod emissions;
pub mod energy;
pub mod exposition;
pub mod rules;
pub mod scalar;
pub mod selector;
pub mod workload;

pub use attribution::{attribute_power, RaplDomain};
pub use clock::{Clock, ManualClock, SystemClock};
pub use counter::{counter_delta, EnergyCounter};
pub use emissions::{compute_emissions, FactorProvider};
pub use energy::{integrate_emissions, integrate_energy};
pub use exposition::{parse_exposition, render_exposition, LabelSet, MetricFamily, MetricKind, Sample};
pub use scalar::Scalar;
pub use workload::{AggregateMetrics, Scope, WorkloadUnit};

/// Hardware profile with `f64` fractions.
pub type Profile = attribution::HardwareProfile<f64>;
/// Node snapshot in `f64`.
pub type Snapshot = attribution::NodeSnapshot<f64>;
/// One workload's usage inside an `f64` snapshot.
pub type Usage = attribution::WorkloadUsage<f64>;
/// Per-workload attributed power in `f64`.
pub type JobPower = attribution::AttributedPower<f64>;
/// Result of attributing one `f64` snapshot.
pub type NodeAttribution = attribution::Attribution<f64>;
/// Integrated energy in `f64`.
pub type Energy = energy::Energy<f64>;
/// Emission factor in `f64`.
pub type Factor = emissions::EmissionFactor<f64>;
