//! Confounded benchmark graph:
//!
//! ```text
//! U₁ = ε₁, U₂ = ε₂, F = ε₃
//! A = F² + U₁ + ε_A           B = U₂ + ε_B
//! C = exp(−B) + ε_C           D = exp(−C)/10 + ε_D
//! E = cos(A) + C/10 + ε_E     Y = cos(D) + sin(E) + U₁ + U₂ + ε_Y
//! ```
//!
//! All ε are standard normal. Given `B = b`, `U₂ ~ N(b/2, 1/2)`.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Roles, Table};
use crate::error::Result;
use crate::seeds;

pub const COLUMNS: [&str; 6] = ["A", "B", "C", "D", "E", "Y"];

fn n01(rng: &mut seeds::Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn simulate(n: usize, seed: u64, roles: Roles) -> Result<Dataset> {
    let mut rng = seeds::sub_rng(seed, 1);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 6];
    for _ in 0..n {
        let u1 = n01(&mut rng);
        let u2 = n01(&mut rng);
        let f = n01(&mut rng);
        let a = f * f + u1 + n01(&mut rng);
        let b = u2 + n01(&mut rng);
        let c = (-b).exp() + n01(&mut rng);
        let d = (-c).exp() / 10.0 + n01(&mut rng);
        let e = a.cos() + c / 10.0 + n01(&mut rng);
        let y = d.cos() + e.sin() + u1 + u2 + n01(&mut rng);
        for (col, v) in cols.iter_mut().zip([a, b, c, d, e, y]) {
            col.push(v);
        }
    }
    let names = COLUMNS.iter().map(|c| c.to_string()).collect();
    Dataset::new(Table::new(names, cols)?, None, roles)
}

/// `A` from its own exogenous chain.
fn draw_a(rng: &mut seeds::Rng) -> f64 {
    let u1 = n01(rng);
    let f = n01(rng);
    f * f + u1 + n01(rng)
}

/// `E[Y | do(D = d), B = b] = cos d + E[sin E | B = b] + b/2`.
pub fn cate_oracle(d: f64, b: f64, n_mc: usize, seed: u64) -> (f64, f64) {
    super::mc_mean(n_mc, seed, |rng| {
        let a = draw_a(rng);
        let c = (-b).exp() + n01(rng);
        let e = a.cos() + c / 10.0 + n01(rng);
        let u2 = b / 2.0 + std::f64::consts::FRAC_1_SQRT_2 * n01(rng);
        d.cos() + e.sin() + u2
    })
}

/// `E[Y | do(B = b), B = b'] = E[cos D + sin E | C ~ P(C | b)] + b'/2`.
pub fn att_oracle(b: f64, b_prime: f64, n_mc: usize, seed: u64) -> (f64, f64) {
    super::mc_mean(n_mc, seed, |rng| {
        let a = draw_a(rng);
        let c = (-b).exp() + n01(rng);
        let d = (-c).exp() / 10.0 + n01(rng);
        let e = a.cos() + c / 10.0 + n01(rng);
        let u2 = b_prime / 2.0 + std::f64::consts::FRAC_1_SQRT_2 * n01(rng);
        d.cos() + e.sin() + u2
    })
}
