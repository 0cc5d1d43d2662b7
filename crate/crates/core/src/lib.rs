//! Simulation and inference for power variations of the stochastic heat
//! equation driven by spatially correlated Riesz-kernel noise.

pub mod error;
pub mod gaussian_limits;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod variations;

pub use error::{Error, Result};

/// Crate version, recorded in experiment provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
