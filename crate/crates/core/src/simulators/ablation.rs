//! `Z ~ U(0,1)`, `X_d | Z ~ N(sin(α_d Z), σ_d²)`, `Y | X ~ N(βᵀ sin X, σ_y²)`,
//! with every noise variance set to half the variance of its signal.
//!
//! D₁ holds (Y, X) and D₂ holds (X, Z), drawn independently.

use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Table};
use crate::error::Result;
use crate::seeds;

pub const ALPHA: [f64; 5] = [10.0, 17.5, 25.0, 32.5, 40.0];
pub const BETA: [f64; 5] = [1.0, 0.5, 1.0 / 3.0, 0.25, 0.2];
pub const X_COLUMNS: [&str; 5] = ["X1", "X2", "X3", "X4", "X5"];
pub const SNR: f64 = 2.0;

const SIGNAL_MC_DRAWS: usize = 1_000_000;
const SIGNAL_MC_SEED: u64 = 0x5EED;

/// `σ_d²` from the closed-form variance of `sin(αZ)`, `Z ~ U(0,1)`.
pub fn x_noise_variances() -> [f64; 5] {
    ALPHA.map(|a| {
        let m = (1.0 - a.cos()) / a;
        let m2 = 0.5 - (2.0 * a).sin() / (4.0 * a);
        (m2 - m * m) / SNR
    })
}

/// `σ_y²` from a fixed-seed Monte Carlo estimate of `Var(βᵀ sin X)`.
pub fn y_noise_variance() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| {
        let sd = x_noise_variances().map(f64::sqrt);
        let mut rng = seeds::rng(SIGNAL_MC_SEED);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..SIGNAL_MC_DRAWS {
            let z: f64 = rng.random();
            let mut sig = 0.0;
            for d in 0..5 {
                let e: f64 = StandardNormal.sample(&mut rng);
                sig += BETA[d] * ((ALPHA[d] * z).sin() + sd[d] * e).sin();
            }
            s += sig;
            s2 += sig * sig;
        }
        let n = SIGNAL_MC_DRAWS as f64;
        (s2 / n - (s / n).powi(2)) / SNR
    })
}

/// Draws `(Z, X)` rows.
fn draw_zx(n: usize, rng: &mut seeds::Rng) -> (Vec<f64>, [Vec<f64>; 5]) {
    let sd = x_noise_variances().map(f64::sqrt);
    let mut z = Vec::with_capacity(n);
    let mut x: [Vec<f64>; 5] = Default::default();
    for _ in 0..n {
        let zi: f64 = rng.random();
        z.push(zi);
        for d in 0..5 {
            let e: f64 = StandardNormal.sample(rng);
            x[d].push((ALPHA[d] * zi).sin() + sd[d] * e);
        }
    }
    (z, x)
}

pub fn simulate(n: usize, seed: u64) -> Result<Dataset> {
    let sy = y_noise_variance().sqrt();
    let mut rng1 = seeds::sub_rng(seed, 1);
    let (_, x1) = draw_zx(n, &mut rng1);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng1);
            (0..5).map(|d| BETA[d] * x1[d][i].sin()).sum::<f64>() + sy * e
        })
        .collect();
    let mut rng2 = seeds::sub_rng(seed, 2);
    let (z2, x2) = draw_zx(n, &mut rng2);

    let xnames = X_COLUMNS.map(String::from);
    let mut names1 = vec!["Y".to_string()];
    names1.extend(xnames.iter().cloned());
    let mut cols1 = vec![y];
    cols1.extend(x1);
    let mut names2 = xnames.to_vec();
    names2.push("Z".into());
    let mut cols2: Vec<Vec<f64>> = x2.into();
    cols2.push(z2);
    Dataset::new(
        Table::new(names1, cols1)?,
        Some(Table::new(names2, cols2)?),
        super::Target::AblationAte.roles(),
    )
}

/// Exact `E[Y | do(Z = z)] = Σ_d β_d sin(sin(α_d z)) e^{−σ_d²/2}`.
pub fn exact_effect(z: f64) -> f64 {
    let var = x_noise_variances();
    (0..5)
        .map(|d| BETA[d] * (ALPHA[d] * z).sin().sin() * (-var[d] / 2.0).exp())
        .sum()
}

/// Monte Carlo `E[Y | do(Z = z)]` by averaging `βᵀ sin X` over `X | z`.
pub fn oracle(z: f64, n_mc: usize, seed: u64) -> (f64, f64) {
    let sd = x_noise_variances().map(f64::sqrt);
    super::mc_mean(n_mc, seed, |rng| {
        (0..5)
            .map(|d| {
                let e: f64 = StandardNormal.sample(rng);
                BETA[d] * ((ALPHA[d] * z).sin() + sd[d] * e).sin()
            })
            .sum()
    })
}
