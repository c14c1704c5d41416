//! Data-generating processes and Monte Carlo ground truth for the three
//! experiment graphs.
//!
//! Oracles reuse one seed for every grid point, so values along a grid share
//! their random numbers and differ smoothly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Roles};
use crate::error::{Error, Result};

pub mod ablation;
pub mod healthcare;
pub mod synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpName {
    Ablation,
    Synthetic,
    Healthcare,
}

impl std::str::FromStr for DgpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "synthetic" => Ok(Self::Synthetic),
            "healthcare" => Ok(Self::Healthcare),
            other => Err(Error::Config(format!("unknown DGP '{other}'"))),
        }
    }
}

impl std::fmt::Display for DgpName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ablation => "ablation",
            Self::Synthetic => "synthetic",
            Self::Healthcare => "healthcare",
        })
    }
}

/// Causal targets with a known sampling chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `E[Y | do(Z = z)]` on the ablation graph.
    AblationAte,
    /// `E[Y | do(D = d), B = b]`.
    SyntheticCate { b: f64 },
    /// `E[Y | do(B = b), B = b']`.
    SyntheticAtt { b_prime: f64 },
    /// `E[VOL | do(statin = s)]`.
    HealthcareAte,
}

impl Target {
    pub fn dgp(&self) -> DgpName {
        match self {
            Self::AblationAte => DgpName::Ablation,
            Self::SyntheticCate { .. } | Self::SyntheticAtt { .. } => DgpName::Synthetic,
            Self::HealthcareAte => DgpName::Healthcare,
        }
    }

    /// Column roles for the two-stage regression that identifies the target.
    pub fn roles(&self) -> Roles {
        let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        match self {
            Self::AblationAte => Roles {
                y: "Y".into(),
                w: Vec::new(),
                v: s(&ablation::X_COLUMNS),
                z: s(&["Z"]),
            },
            Self::SyntheticCate { .. } => Roles {
                y: "Y".into(),
                w: s(&["D", "B"]),
                v: s(&["C"]),
                z: s(&["B"]),
            },
            Self::SyntheticAtt { .. } => Roles {
                y: "Y".into(),
                w: s(&["B"]),
                v: s(&["C"]),
                z: s(&["B"]),
            },
            Self::HealthcareAte => Roles {
                y: "VOL".into(),
                w: Vec::new(),
                v: s(&["PSA"]),
                z: s(&["statin", "age", "bmi"]),
            },
        }
    }

    /// Intervention range searched by causal BO.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::AblationAte => (0.0, 1.0),
            Self::SyntheticCate { .. } | Self::SyntheticAtt { .. } => (-5.0, 5.0),
            Self::HealthcareAte => (0.0, 1.0),
        }
    }
}

/// Which healthcare treatment columns are drawn as binary indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// Columns hold the logistic probabilities themselves. Statin is then
    /// a deterministic function of (age, bmi).
    Continuous,
    /// Columns hold Bernoulli draws with those probabilities.
    #[default]
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: DgpName,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub propensity: PropensityMode,
}

impl DgpSpec {
    pub fn new(name: DgpName, n: usize, seed: u64) -> Self {
        Self {
            name,
            n,
            seed,
            propensity: PropensityMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("need n ≥ 2, got {}", self.n)));
        }
        Ok(())
    }

    /// Default target for the graph, used for roles when simulating.
    pub fn default_target(&self) -> Target {
        match self.name {
            DgpName::Ablation => Target::AblationAte,
            DgpName::Synthetic => Target::SyntheticCate { b: 0.0 },
            DgpName::Healthcare => Target::HealthcareAte,
        }
    }
}

/// Draws a dataset with the default roles of its graph.
pub fn simulate(spec: &DgpSpec) -> Result<Dataset> {
    simulate_for(spec, &spec.default_target())
}

/// Draws a dataset laid out for `target`.
pub fn simulate_for(spec: &DgpSpec, target: &Target) -> Result<Dataset> {
    spec.validate()?;
    if target.dgp() != spec.name {
        return Err(Error::Unidentifiable(format!(
            "{:?} is not defined on the {} graph",
            target, spec.name
        )));
    }
    match spec.name {
        DgpName::Ablation => ablation::simulate(spec.n, spec.seed),
        DgpName::Synthetic => synthetic::simulate(spec.n, spec.seed, target.roles()),
        DgpName::Healthcare => healthcare::simulate(spec.n, spec.seed, spec.propensity),
    }
}

/// Monte Carlo estimates with their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValues {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Mean and standard error of `n_mc` draws of `sample(rng)`.
pub(crate) fn mc_mean(
    n_mc: usize,
    seed: u64,
    mut sample: impl FnMut(&mut crate::seeds::Rng) -> f64,
) -> (f64, f64) {
    let mut rng = crate::seeds::rng(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_mc {
        let x = sample(&mut rng);
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let var = m2 / (n_mc.max(2) - 1) as f64;
    (mean, (var / n_mc as f64).sqrt())
}

/// Ground-truth effect of `target` along `grid` (the intervened value).
pub fn oracle_effect(
    target: &Target,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
    propensity: PropensityMode,
) -> Result<OracleValues> {
    if n_mc < 2 {
        return Err(Error::InvalidParameter("n_mc must be at least 2".into()));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("oracle grid"));
    }
    let (values, stderr): (Vec<f64>, Vec<f64>) = grid
        .par_iter()
        .map(|&x| match *target {
            Target::AblationAte => ablation::oracle(x, n_mc, seed),
            Target::SyntheticCate { b } => synthetic::cate_oracle(x, b, n_mc, seed),
            Target::SyntheticAtt { b_prime } => synthetic::att_oracle(x, b_prime, n_mc, seed),
            Target::HealthcareAte => healthcare::oracle(Some(x), n_mc, seed, propensity),
        })
        .unzip();
    Ok(OracleValues {
        grid: grid.to_vec(),
        values,
        stderr,
    })
}

/// `k` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect(),
    }
}
