//! Completion time of federated learning over a shared slotted uplink.
//!
//! The crate computes how many SGD iterations a strongly convex federated
//! task needs ([`convergence`]), how long each iteration takes under TDMA
//! ([`tdma`]) or slotted random access ([`random_access`]), how to split the
//! total batch across devices to shorten iterations ([`allocation`]), and
//! checks all of it against a slot-level simulator ([`simulator`]) and a
//! small federated trainer ([`trainer`]).
//!
//! Analytic code is generic over [`Scalar`] (`f32` or `f64`); the `*F64` and
//! `*F32` aliases below name the concrete instantiations.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod convergence;
pub mod error;
pub mod random_access;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod stats;
pub mod system;
pub mod tdma;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use stats::McEstimate;
pub use system::{validate_config, BatchAllocation, Protocol, SystemConfig};

pub type SystemConfigF64 = system::SystemConfig<f64>;
pub type SystemConfigF32 = system::SystemConfig<f32>;
pub type ConvergenceConstantsF64 = convergence::ConvergenceConstants<f64>;
pub type ConvergenceConstantsF32 = convergence::ConvergenceConstants<f32>;
pub type AvailabilityPmfF64 = random_access::AvailabilityPmf<f64>;
pub type AvailabilityPmfF32 = random_access::AvailabilityPmf<f32>;
pub type RaTimingF64 = random_access::RaTiming<f64>;
pub type RaTimingF32 = random_access::RaTiming<f32>;
pub type TwoDeviceOptimumF64 = allocation::TwoDeviceOptimum<f64>;
pub type TwoDeviceOptimumF32 = allocation::TwoDeviceOptimum<f32>;
pub type ThreeDeviceOptimumF64 = allocation::ThreeDeviceOptimum<f64>;
pub type DatasetF64 = trainer::Dataset<f64>;
pub type DatasetF32 = trainer::Dataset<f32>;
pub type ModelStateF64 = trainer::ModelState<f64>;
pub type ModelStateF32 = trainer::ModelState<f32>;
