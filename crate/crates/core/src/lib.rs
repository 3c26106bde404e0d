//! Certified motion-primitive planning.
//!
//! Train a Gaussian prior over planning-network weights with evolution
//! strategies, sample a finite policy set from it, measure each policy on a
//! fresh batch of obstacle courses, then pick the posterior over the set that
//! minimizes a PAC-Bayes upper bound on the expected failure cost.

pub mod bounds;
pub mod config;
pub mod error;
pub mod es;
pub mod export;
pub mod matrix;
pub mod pipeline;
pub mod policy;
pub mod rep;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

/// Version tag written into every JSON artifact as `spec_version`.
pub const FORMAT_VERSION: &str = "1.0";
