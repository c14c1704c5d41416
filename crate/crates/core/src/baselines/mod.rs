//! Comparison methods: the two-stage kernel-ridge plug-in estimator, the
//! finite-dimensional nuclear-dominant posterior, and a sampling GP.

pub mod bayesimp;
pub mod plugin;
pub mod sampling_gp;

pub use bayesimp::{BayesImp, BayesImpParams};
pub use plugin::{plugin_estimator, PlugIn};
pub use sampling_gp::{sampling_gp_effect, SamplingGp};
