//! Prostate-cancer graph. D₁ follows
//!
//! ```text
//! age = U[15, 75]
//! bmi = N(27 − 0.01·age, 0.7²)
//! aspirin = σ(−8 + 0.1·age + 0.03·bmi)
//! statin = σ(−13 + 0.1·age + 0.2·bmi)
//! cancer = σ(2.2 − 0.05·age + 0.01·bmi − 0.04·statin + 0.02·aspirin)
//! PSA = N(6.8 + 0.04·age − 0.15·bmi − 0.6·statin + 0.55·aspirin + cancer, 0.4²)
//! ```
//!
//! and D₂ draws PSA the same way with `VOL = PSA + U`, `Var U` chosen so
//! that the regression of VOL on PSA has `R² = 0.13`.

use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::PropensityMode;
use crate::data::{Dataset, Table};
use crate::error::Result;
use crate::seeds;

pub const R_SQUARED: f64 = 0.13;
pub const VOL_SLOPE: f64 = 1.0;
pub const FUSION_COLUMNS: [&str; 6] = ["age", "bmi", "aspirin", "statin", "cancer", "PSA"];

const PSA_MC_DRAWS: usize = 1_000_000;
const PSA_MC_SEED: u64 = 0x95A;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
struct Row {
    age: f64,
    bmi: f64,
    aspirin: f64,
    statin: f64,
    cancer: f64,
    psa: f64,
}

fn draw(rng: &mut seeds::Rng, mode: PropensityMode, statin_override: Option<f64>) -> Row {
    let realise = |p: f64, rng: &mut seeds::Rng| match mode {
        PropensityMode::Continuous => p,
        PropensityMode::Bernoulli => f64::from(u8::from(rng.random::<f64>() < p)),
    };
    let age = rng.random_range(15.0..75.0);
    let e: f64 = StandardNormal.sample(rng);
    let bmi = 27.0 - 0.01 * age + 0.7 * e;
    let aspirin = realise(sigmoid(-8.0 + 0.1 * age + 0.03 * bmi), rng);
    let natural = realise(sigmoid(-13.0 + 0.1 * age + 0.2 * bmi), rng);
    let statin = statin_override.unwrap_or(natural);
    let cancer = realise(
        sigmoid(2.2 - 0.05 * age + 0.01 * bmi - 0.04 * statin + 0.02 * aspirin),
        rng,
    );
    let e: f64 = StandardNormal.sample(rng);
    let psa = 6.8 + 0.04 * age - 0.15 * bmi - 0.6 * statin + 0.55 * aspirin + cancer + 0.4 * e;
    Row {
        age,
        bmi,
        aspirin,
        statin,
        cancer,
        psa,
    }
}

/// Observational `Var(PSA)` from a fixed-seed Monte Carlo run.
pub fn psa_variance(mode: PropensityMode) -> f64 {
    static CELLS: [OnceLock<f64>; 2] = [OnceLock::new(), OnceLock::new()];
    let idx = match mode {
        PropensityMode::Continuous => 0,
        PropensityMode::Bernoulli => 1,
    };
    *CELLS[idx].get_or_init(|| {
        let mut rng = seeds::rng(PSA_MC_SEED);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..PSA_MC_DRAWS {
            let p = draw(&mut rng, mode, None).psa;
            s += p;
            s2 += p * p;
        }
        let n = PSA_MC_DRAWS as f64;
        s2 / n - (s / n).powi(2)
    })
}

/// Noise variance of `U` in `VOL = β̂·PSA + U`.
pub fn vol_noise_variance(mode: PropensityMode) -> f64 {
    VOL_SLOPE * VOL_SLOPE * psa_variance(mode) * (1.0 / R_SQUARED - 1.0)
}

pub fn simulate(n: usize, seed: u64, mode: PropensityMode) -> Result<Dataset> {
    let sd_u = vol_noise_variance(mode).sqrt();
    let mut rng = seeds::sub_rng(seed, 2);
    let mut psa = Vec::with_capacity(n);
    let mut vol = Vec::with_capacity(n);
    for _ in 0..n {
        let p = draw(&mut rng, mode, None).psa;
        let e: f64 = StandardNormal.sample(&mut rng);
        psa.push(p);
        vol.push(VOL_SLOPE * p + sd_u * e);
    }
    let mut rng = seeds::sub_rng(seed, 1);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 6];
    for _ in 0..n {
        let r = draw(&mut rng, mode, None);
        for (col, v) in cols
            .iter_mut()
            .zip([r.age, r.bmi, r.aspirin, r.statin, r.cancer, r.psa])
        {
            col.push(v);
        }
    }
    Dataset::new(
        Table::new(vec!["PSA".into(), "VOL".into()], vec![psa, vol])?,
        Some(Table::new(
            FUSION_COLUMNS.iter().map(|c| c.to_string()).collect(),
            cols,
        )?),
        super::Target::HealthcareAte.roles(),
    )
}

/// `E[VOL | do(statin = s)]`, or the observational `E[VOL]` when `statin`
/// is `None`. Since `E[U] = 0` this is `β̂·E[PSA]` under the mutilated chain.
pub fn oracle(statin: Option<f64>, n_mc: usize, seed: u64, mode: PropensityMode) -> (f64, f64) {
    super::mc_mean(n_mc, seed, |rng| VOL_SLOPE * draw(rng, mode, statin).psa)
}
