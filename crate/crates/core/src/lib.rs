//! Gaussian-process posteriors over causal effects written as two-stage
//! kernel regressions, with spectral-measure calibration, baselines,
//! simulators and a causal Bayesian-optimisation harness.

pub mod baselines;
pub mod calibration;
pub mod cbo;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod posterior;
pub mod seeds;
pub mod simulators;
pub mod truncated;

pub use error::{Error, Result};
