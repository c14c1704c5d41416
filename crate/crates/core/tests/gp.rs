mod common;

use approx::assert_relative_eq;
use common::{gram as ref_gram, normal_matrix, random_params, random_problem, rng, Layout};
use impspec::data::Problem;
use impspec::gp::{
    adam_fit, adam_maximize, fd_gradient, gaussian_log_likelihood, log_marginal_likelihood,
    weighted_log_marginal_likelihood, AdamConfig, FittedModel, ModelParams, Stage,
};
use impspec::kernels::{KernelParams, SpectralMeasure};
use impspec::linalg::{Factor, MAX_JITTER};
use impspec::simulators::{simulate, DgpName, DgpSpec};
use impspec::truncated::nystrom_eigen;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(y | 0, S)` through an LU determinant and explicit inverse.
fn ref_gaussian(s: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let lu = s.clone().lu();
    let det = lu.determinant();
    let inv = lu.try_inverse().unwrap();
    -0.5 * (y.transpose() * inv * y)[(0, 0)] - 0.5 * det.ln() - 0.5 * y.len() as f64 * LN_2PI
}

#[test]
fn scalar_likelihood_value() {
    let k = DMatrix::from_element(1, 1, 1.0);
    let y = DVector::from_element(1, 0.0);
    let v = gaussian_log_likelihood(&k, &y, 1.0).unwrap();
    assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln(), epsilon = 1e-14);
}

#[test]
fn stage1_likelihood_matches_dense_formula() {
    for seed in 0..6u64 {
        let problem = random_problem(seed, 10, if seed % 2 == 0 { Layout::Single } else { Layout::NoW });
        let p = random_params(&problem, seed);
        let mut k = ref_gram(&problem.v1, &problem.v1, &p.kv);
        if let (Some(kw), Some(w)) = (&p.kw, &problem.w1) {
            k.component_mul_assign(&ref_gram(w, w, kw));
        }
        let s = k + DMatrix::identity(10, 10) * p.sigma2;
        let v = log_marginal_likelihood(&problem, &p).unwrap();
        assert_relative_eq!(v, ref_gaussian(&s, &problem.y), epsilon = 1e-9);
    }
}

#[test]
fn weighted_objective_matches_dense_formula() {
    let problem = random_problem(8, 12, Layout::Fusion);
    let p = random_params(&problem, 8);
    let n = problem.n2() as f64;
    let a = ref_gram(&problem.z2, &problem.z2, &p.kz) + DMatrix::identity(problem.n2(), problem.n2()) * p.eta2;
    let kvv = ref_gram(&problem.v2, &problem.v2, &p.kv);
    let tau = p.kv.amplitude;
    let lu = a.clone().lu();
    let expected = -0.5 * tau * n * LN_2PI
        - 0.5 * tau * lu.determinant().ln()
        - 0.5 * (lu.try_inverse().unwrap() * kvv).trace();
    let v = weighted_log_marginal_likelihood(&problem, &p).unwrap();
    assert_relative_eq!(v, expected, max_relative = 1e-10);
}

#[test]
fn weighted_objective_is_spectrally_weighted_likelihood() {
    let mut r = rng(21);
    let z = normal_matrix(&mut r, 5, 1);
    let v = DMatrix::from_fn(5, 1, |i, _| -1.2 + 0.6 * i as f64);
    let y = DVector::from_element(5, 0.0);
    let problem = Problem::single(y, None, v, z).unwrap();
    let p = ModelParams {
        kw: None,
        kv: KernelParams::new(vec![1.0], 1.0).unwrap(),
        kz: KernelParams::new(vec![0.8], 1.0).unwrap(),
        sigma2: 0.1,
        eta2: 0.2,
    };
    let mu = SpectralMeasure::isotropic(1, 1.0).unwrap();
    let f = nystrom_eigen(&p.kv, &mu, 2000, 100, 2).unwrap();
    let phi = f.evaluate(&problem.v2).unwrap();
    let a = ref_gram(&problem.z2, &problem.z2, &p.kz) + DMatrix::identity(5, 5) * p.eta2;
    let total: f64 = (0..f.count())
        .map(|j| {
            let lam = f.eigenvalues[j];
            let e = phi.column(j) / lam.sqrt();
            lam * ref_gaussian(&a, &e.into_owned())
        })
        .sum();
    let v = weighted_log_marginal_likelihood(&problem, &p).unwrap();
    assert!((v - total).abs() <= 0.05, "{v} vs {total}");
}

#[test]
fn likelihood_is_permutation_invariant() {
    let problem = random_problem(3, 15, Layout::Single);
    let p = random_params(&problem, 3);
    let perm: Vec<usize> = (0..15).rev().collect();
    let permuted = problem.select(&perm, &perm);
    let a = log_marginal_likelihood(&problem, &p).unwrap();
    let b = log_marginal_likelihood(&permuted, &p).unwrap();
    assert_relative_eq!(a, b, max_relative = 1e-12);
}

#[test]
fn jitter_ladder_is_bounded() {
    let singular = DMatrix::from_element(4, 4, 1.0);
    let f = Factor::new(&singular, 0.0).unwrap();
    assert!(f.jitter() > 0.0 && f.jitter() <= MAX_JITTER);
    let indefinite = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
    assert!(Factor::new(&indefinite, 0.0).is_err());
}

#[test]
fn adam_stays_at_stationary_point() {
    let f = |x: &[f64]| Ok(-(x[0] - 1.0).powi(2) - (x[1] + 2.0).powi(2));
    let (x, trace) =
        adam_maximize(&f, &[1.0, -2.0], &[-10.0; 2], &[10.0; 2], &AdamConfig::default()).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
    assert_eq!(trace.best[0], 0.0);
}

#[test]
fn adam_respects_box() {
    let f = |x: &[f64]| Ok(x[0]);
    let (x, _) = adam_maximize(&f, &[0.0], &[-1.0], &[2.0], &AdamConfig::default()).unwrap();
    assert!(x[0] <= 2.0 && x[0] > 1.9);
}

#[test]
fn stage1_fit_increases_likelihood() {
    let data = simulate(&DgpSpec::new(DgpName::Ablation, 100, 0)).unwrap();
    let problem = data.problem().unwrap();
    let init = ModelParams::initial(&problem);
    let cfg = AdamConfig {
        iterations: 100,
        ..AdamConfig::default()
    };
    let (fitted, trace) = adam_fit(Stage::One, &problem, &init, &cfg).unwrap();
    let before = log_marginal_likelihood(&problem, &init).unwrap();
    let after = log_marginal_likelihood(&problem, &fitted).unwrap();
    assert!(after > before);
    assert!(trace.best.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(fitted.kz, init.kz);
    assert!(FittedModel::new(problem, fitted).is_ok());
}

#[test]
fn finite_differences_match_four_point_stencil() {
    let problem = random_problem(5, 20, Layout::Single);
    let p = random_params(&problem, 5);
    let f = |x: &[f64]| {
        let mut q = p.clone();
        q.kv.lengthscales[0] = x[0].exp();
        q.sigma2 = x[1].exp();
        log_marginal_likelihood(&problem, &q)
    };
    let x = [p.kv.lengthscales[0].ln(), p.sigma2.ln()];
    let g = fd_gradient(&f, &x, 1e-4).unwrap();
    let h = 1e-3;
    for i in 0..2 {
        let at = |d: f64| {
            let mut y = x;
            y[i] += d;
            f(&y).unwrap()
        };
        let stencil = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        assert!((g[i] - stencil).abs() <= 1e-3 * stencil.abs().max(1.0), "{} vs {stencil}", g[i]);
    }
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let problem = random_problem(1, 10, Layout::Single);
    let mut p = random_params(&problem, 1);
    p.kz = KernelParams::isotropic(3, 1.0);
    assert!(log_marginal_likelihood(&problem, &p).is_err());
    p.kz = KernelParams::isotropic(1, 1.0);
    p.sigma2 = 0.0;
    assert!(FittedModel::new(problem, p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cached_factors_reconstruct_their_matrices(seed in 0u64..1000, n in 3usize..20) {
        let problem = random_problem(seed, n, Layout::Fusion);
        let p = random_params(&problem, seed);
        let model = FittedModel::new(problem.clone(), p.clone()).unwrap();
        let (k1, k2) = model.reconstructed();
        let mut s1 = ref_gram(&problem.v1, &problem.v1, &p.kv);
        if let (Some(kw), Some(w)) = (&p.kw, &problem.w1) {
            s1.component_mul_assign(&ref_gram(w, w, kw));
        }
        let s1 = s1 + DMatrix::identity(n, n) * p.sigma2;
        let s2 = ref_gram(&problem.z2, &problem.z2, &p.kz)
            + DMatrix::identity(problem.n2(), problem.n2()) * p.eta2;
        prop_assert!((k1 - s1).amax() < 1e-10);
        prop_assert!((k2 - s2).amax() < 1e-10);
    }

    #[test]
    fn likelihood_is_finite_and_bounded(seed in 0u64..1000) {
        let problem = random_problem(seed, 12, Layout::NoW);
        let p = random_params(&problem, seed);
        let v = log_marginal_likelihood(&problem, &p).unwrap();
        // The density of y is at most that of a point mass blurred by σ².
        let bound = -0.5 * 12.0 * (2.0 * std::f64::consts::PI * p.sigma2).ln();
        prop_assert!(v.is_finite() && v <= bound + 1e-9);
    }
}
