//! Shared fixtures and independent reference computations for the
//! integration tests.

#![allow(dead_code)]

use impspec::data::Problem;
use impspec::gp::ModelParams;
use impspec::kernels::KernelParams;
use impspec::posterior::EvalPoint;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha20Rng) -> f64 {
    // Box–Muller keeps the fixtures independent of the library's samplers.
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_matrix(r: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(r))
}

#[derive(Debug, Clone, Copy)]
pub enum Layout {
    Single,
    Fusion,
    NoW,
}

pub const LAYOUTS: [Layout; 3] = [Layout::Single, Layout::Fusion, Layout::NoW];

/// Smooth random problem with `V = sin(Z) + noise` and a nonlinear outcome.
pub fn random_problem(seed: u64, n: usize, layout: Layout) -> Problem {
    let mut r = rng(seed);
    let dv = 1 + (seed % 2) as usize;
    let z = normal_matrix(&mut r, n, 1);
    let v = DMatrix::from_fn(n, dv, |i, j| (z[(i, 0)] + j as f64).sin() + 0.3 * normal(&mut r));
    let w = normal_matrix(&mut r, n, 1);
    let y = DVector::from_fn(n, |i, _| {
        let s: f64 = v.row(i).iter().sum();
        s.cos() + 0.5 * w[(i, 0)] + 0.1 * normal(&mut r)
    });
    match layout {
        Layout::Single => Problem::single(y, Some(w), v, z).unwrap(),
        Layout::NoW => Problem::single(y, None, v, z).unwrap(),
        Layout::Fusion => {
            let n2 = n + 7;
            let z2 = normal_matrix(&mut r, n2, 1);
            let v2 = DMatrix::from_fn(n2, dv, |i, j| {
                (z2[(i, 0)] + j as f64).sin() + 0.3 * normal(&mut r)
            });
            Problem::fused(y, Some(w), v, v2, z2).unwrap()
        }
    }
}

fn kp(r: &mut ChaCha20Rng, dim: usize) -> KernelParams {
    KernelParams {
        lengthscales: (0..dim).map(|_| r.random_range(0.3..3.0)).collect(),
        amplitude: r.random_range(0.5..2.0),
    }
}

/// Hyperparameters drawn from a well-conditioned box.
pub fn random_params(problem: &Problem, seed: u64) -> ModelParams {
    let mut r = rng(seed ^ 0xA5A5);
    ModelParams {
        kw: problem.w1.as_ref().map(|w| kp(&mut r, w.ncols())),
        kv: kp(&mut r, problem.v_dim()),
        kz: kp(&mut r, problem.z_dim()),
        sigma2: r.random_range(0.05..0.5),
        eta2: r.random_range(0.05..0.5),
    }
}

pub fn random_point(problem: &Problem, seed: u64) -> EvalPoint {
    let mut r = rng(seed ^ 0x5A5A);
    EvalPoint::new(
        (0..problem.w_dim()).map(|_| r.random_range(-2.0..2.0)).collect(),
        (0..problem.z_dim()).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
}

/// Squared-exponential kernel written out directly.
pub fn se(x: &[f64], y: &[f64], k: &KernelParams) -> f64 {
    let d2: f64 = x
        .iter()
        .zip(y)
        .zip(&k.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    k.amplitude * (-0.5 * d2).exp()
}

pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &KernelParams) -> DMatrix<f64> {
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let (ra, rb) = (rows(a), rows(b));
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| se(&ra[i], &rb[j], k))
}

fn inv(m: DMatrix<f64>) -> DMatrix<f64> {
    m.lu().try_inverse().expect("invertible")
}

/// Two-stage kernel ridge regression estimate with explicit LU inverses.
pub fn krr_effect(problem: &Problem, params: &ModelParams, point: &EvalPoint) -> f64 {
    let n1 = problem.n1();
    let n2 = problem.n2();
    let kvv = gram(&problem.v1, &problem.v1, &params.kv);
    let (kww, hw) = match (&params.kw, &problem.w1) {
        (Some(k), Some(w)) => (
            gram(w, w, k),
            gram(w, &DMatrix::from_row_slice(1, point.w.len(), &point.w), k).column(0).into_owned(),
        ),
        _ => (DMatrix::from_element(n1, n1, 1.0), DVector::from_element(n1, 1.0)),
    };
    let a1 = inv(kww.component_mul(&kvv) + DMatrix::identity(n1, n1) * params.sigma2);
    let c = a1 * &problem.y;
    let a2 = inv(gram(&problem.z2, &problem.z2, &params.kz) + DMatrix::identity(n2, n2) * params.eta2);
    let kz = gram(&problem.z2, &DMatrix::from_row_slice(1, point.z.len(), &point.z), &params.kz);
    let beta = a2 * kz;
    let k21 = gram(&problem.v2, &problem.v1, &params.kv);
    (beta.transpose() * k21 * c.component_mul(&hw))[(0, 0)]
}
