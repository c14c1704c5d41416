use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{default_alphas, DEFAULT_OMEGAS};
use crate::error::{Error, Result};
use crate::gp::AdamConfig;
use crate::simulators::PropensityMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Ablation,
    Synthetic,
    HealthcareCbo,
    /// Maximise `E[Y | do(B = b), B = 0]`.
    SyntheticCboFrontdoor,
    /// Minimise `E[Y | do(D = d), B = 0]`.
    SyntheticCboBackdoor,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        Self::Ablation,
        Self::Synthetic,
        Self::HealthcareCbo,
        Self::SyntheticCboFrontdoor,
        Self::SyntheticCboBackdoor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ablation => "ablation",
            Self::Synthetic => "synthetic",
            Self::HealthcareCbo => "healthcare-cbo",
            Self::SyntheticCboFrontdoor => "synthetic-cbo-frontdoor",
            Self::SyntheticCboBackdoor => "synthetic-cbo-backdoor",
        }
    }

    pub fn is_cbo(&self) -> bool {
        matches!(
            self,
            Self::HealthcareCbo | Self::SyntheticCboFrontdoor | Self::SyntheticCboBackdoor
        )
    }

    fn default_n(&self) -> usize {
        match self {
            Self::SyntheticCboFrontdoor => 500,
            _ => 100,
        }
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

impl std::fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that determines a benchmark's results. Thread count is not
/// part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub experiment: ExperimentName,
    pub trials: usize,
    pub seed: u64,
    /// Rows per simulated table.
    pub n: usize,
    pub adam: AdamConfig,
    pub n_boot: usize,
    /// Bootstrap replicates over trials for coverage bands.
    pub outer_boot: usize,
    pub omegas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub oracle_mc: usize,
    pub grid_size: usize,
    pub sampling_gp_samples: usize,
    pub bo_iters: usize,
    pub refit_every: usize,
    pub opt_varsigma: bool,
    pub refit_boot: bool,
    pub propensity: PropensityMode,
}

impl BenchmarkConfig {
    /// Desk-scale defaults.
    pub fn new(experiment: ExperimentName, trials: usize, seed: u64) -> Self {
        Self {
            experiment,
            trials,
            seed,
            n: experiment.default_n(),
            adam: AdamConfig::default(),
            n_boot: 20,
            outer_boot: 100,
            omegas: DEFAULT_OMEGAS.to_vec(),
            alphas: default_alphas(),
            oracle_mc: 100_000,
            grid_size: if experiment.is_cbo() {
                crate::cbo::GRID_SIZE
            } else {
                100
            },
            sampling_gp_samples: 200,
            bo_iters: 10,
            refit_every: 3,
            opt_varsigma: false,
            refit_boot: false,
            propensity: PropensityMode::default(),
        }
    }

    /// Trial counts of the original study: 50 for the estimation suites and
    /// 20 for causal BO.
    pub fn full_scale(experiment: ExperimentName, seed: u64) -> Self {
        let trials = if experiment.is_cbo() { 20 } else { 50 };
        Self::new(experiment, trials, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config("n must be at least 4".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if self.n_boot == 0 || self.oracle_mc < 2 || self.sampling_gp_samples == 0 {
            return Err(Error::Config(
                "n_boot, oracle_mc and sampling_gp_samples must be positive".into(),
            ));
        }
        if self.experiment.is_cbo() && self.bo_iters == 0 {
            return Err(Error::Config("bo_iters must be positive".into()));
        }
        if self.omegas.is_empty() || self.omegas.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("ω candidates must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
