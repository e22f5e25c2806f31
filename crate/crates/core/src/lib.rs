//! Federated averaging over noisy uplink and downlink channels.
//!
//! The crate simulates FedAvg on synthetic strongly convex quadratic tasks
//! whose optimum and smoothness constants are known in closed form, with
//! effective-noise or analog over-the-air links whose SNR follows a chosen
//! control policy, and evaluates the resulting traces against the `O(1/t)`
//! bounds.

// `!(x > 0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod engine;
pub mod error;
pub mod model;
pub mod policy;
pub mod scalar;
pub mod task;

pub use error::{Error, Result};
pub use scalar::{BigExact, Exact, Scalar};

/// Model vector in simulation precision.
pub type Model = model::ModelVector<f64>;
/// Model vector in exact rational arithmetic.
pub type ExactModel = model::ModelVector<Exact>;
pub type Schedule = policy::LearningRateSchedule<f64>;
pub type ExactSchedule = policy::LearningRateSchedule<Exact>;
pub type Bound = analysis::BoundSpec<f64>;
pub type ExactBound = analysis::BoundSpec<Exact>;
