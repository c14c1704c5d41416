mod common;

use approx::assert_relative_eq;
use common::{random_params, random_problem, Layout};
use impspec::baselines::plugin::PlugIn;
use impspec::cbo::{
    expected_improvement, impspec_curve, plugin_curve, run_cbo, BoConfig, BoTrace, Curve,
    Direction, PriorKind, Rbf, SurrogatePrior,
};
use impspec::error::Error;
use impspec::gp::FittedModel;
use impspec::kernels::{BaseScale, SpectralMeasure};
use impspec::posterior::{EvalPoint, Posterior};
use impspec::simulators::linspace;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cfg(iters: usize) -> BoConfig {
    BoConfig {
        iters,
        refit_every: 3,
        direction: Direction::Minimize,
    }
}

#[test]
fn plain_prior_is_zero_mean_rbf() {
    let grid = linspace(0.0, 1.0, 7);
    let rbf = Rbf::for_domain(0.0, 1.0);
    let p = SurrogatePrior::plain(grid.clone(), rbf);
    assert_eq!(p.mean, DVector::zeros(7));
    assert_eq!(p.full_cov(), rbf.gram(&grid));
    assert_eq!(p.kind, PriorKind::Plain);
}

#[test]
fn impspec_prior_adds_rbf_to_posterior_covariance() {
    let problem = random_problem(40, 25, Layout::NoW);
    let model = FittedModel::new(problem.clone(), random_params(&problem, 40)).unwrap();
    let mu = SpectralMeasure::from_points(&problem.v1, 1.0, BaseScale::Variance).unwrap();
    let post = Posterior::new(&model, &mu).unwrap();
    let curve = Curve::Direct {
        w: vec![],
        z: vec![0.0],
        w_dims: vec![],
        z_dims: vec![0],
    };
    let grid = linspace(-1.0, 1.0, 9);
    let (mean, cov) = impspec_curve(&post, &curve, &grid).unwrap();
    let rbf = Rbf::for_domain(-1.0, 1.0);
    let prior = SurrogatePrior::from_moments(PriorKind::Impspec, grid.clone(), mean, cov, rbf).unwrap();
    let full = prior.full_cov();
    for (i, x) in grid.iter().enumerate() {
        let m = post.moments(&EvalPoint::z_only(vec![*x])).unwrap();
        assert_relative_eq!(prior.mean[i], m.mean, epsilon = 1e-12);
        assert_relative_eq!(full[(i, i)], m.s1 + m.s2 + m.s3 + rbf.variance, epsilon = 1e-10);
    }
}

#[test]
fn plugin_prior_uses_second_moment_variance() {
    let problem = random_problem(41, 20, Layout::NoW);
    let params = random_params(&problem, 41);
    let curve = Curve::Averaged {
        w: vec![],
        z_dim: 0,
        marginal: vec![vec![]],
    };
    let xs = linspace(-1.0, 1.0, 5);
    let (mean, var) = plugin_curve(&problem, &params, &curve, &xs).unwrap();
    let y2 = problem.y.map(|v| v * v);
    let first = PlugIn::new(&problem, &params).unwrap();
    let second = PlugIn::with_outcome(&problem, &params, &y2).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let pt = EvalPoint::z_only(vec![*x]);
        let m = first.evaluate(&pt).unwrap();
        assert_relative_eq!(mean[i], m, epsilon = 1e-12);
        assert_relative_eq!(var[i], (second.evaluate(&pt).unwrap() - m * m).max(0.0), epsilon = 1e-12);
    }
    let prior = SurrogatePrior::from_plugin(xs, mean, var.clone(), Rbf::for_domain(-1.0, 1.0)).unwrap();
    assert_relative_eq!(prior.cov[(0, 4)], (var[0] * var[4]).sqrt(), epsilon = 1e-12);
}

#[test]
fn mismatched_prior_is_rejected() {
    let r = Rbf::for_domain(0.0, 1.0);
    let bad = SurrogatePrior::from_moments(
        PriorKind::Impspec,
        vec![0.0, 1.0],
        DVector::zeros(3),
        DMatrix::zeros(2, 2),
        r,
    );
    assert!(bad.is_err());
}

/// `E[max(incumbent − f, 0)]` for `f ~ N(mean, sd²)` by Simpson's rule.
fn ei_quadrature(mean: f64, sd: f64, incumbent: f64) -> f64 {
    let n = 20_000;
    let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let h = (hi - lo) / n as f64;
    let f = |t: f64| {
        let dens = (-(t - mean).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        (incumbent - t).max(0.0) * dens
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn expected_improvement_matches_quadrature() {
    for (m, s, inc) in [(0.0, 1.0, 0.0), (0.3, 0.5, -0.2), (-1.0, 2.0, 0.5)] {
        let ei = expected_improvement(m, s, inc, Direction::Minimize);
        assert_relative_eq!(ei, ei_quadrature(m, s, inc), max_relative = 1e-6, epsilon = 1e-12);
        let mirrored = expected_improvement(-m, s, -inc, Direction::Maximize);
        assert_relative_eq!(ei, mirrored, epsilon = 1e-14);
    }
    assert_eq!(expected_improvement(0.0, 0.0, 1.0, Direction::Minimize), 1.0);
}

#[test]
fn conditioning_interpolates_observations() {
    let grid = linspace(0.0, 1.0, 21);
    let p = SurrogatePrior::plain(grid, Rbf::for_domain(0.0, 1.0));
    let (m, v) = p.condition(&[3, 15], &[0.7, -0.2]).unwrap();
    assert!((m[3] - 0.7).abs() < 1e-4 && (m[15] + 0.2).abs() < 1e-4);
    assert!(v[3] < 1e-5 && v[15] < 1e-5);
}

#[test]
fn constant_oracle_has_no_regret() {
    let p = SurrogatePrior::plain(linspace(0.0, 1.0, 50), Rbf::for_domain(0.0, 1.0));
    let t = run_cbo(&p, &mut |_| Ok(2.5), 2.5, &cfg(6), None).unwrap();
    assert_eq!(t.xs.len(), 6);
    assert_eq!(t.cumulative_regret(), 0.0);
}

#[test]
fn informative_prior_queries_the_optimum_first() {
    let grid = linspace(0.0, 1.0, 101);
    let f = |x: f64| (x - 0.37).powi(2);
    let mean = DVector::from_iterator(101, grid.iter().map(|&x| f(x)));
    let rbf = Rbf {
        lengthscale: 0.1,
        variance: 1e-8,
    };
    let p = SurrogatePrior::from_moments(PriorKind::Impspec, grid, mean, DMatrix::zeros(101, 101), rbf)
        .unwrap();
    let best = f(0.37);
    let t = run_cbo(&p, &mut |x| Ok(f(x)), best, &cfg(1), None).unwrap();
    assert_relative_eq!(t.xs[0], 0.37, epsilon = 1e-12);
    assert!(t.cumulative_regret() < 1e-20);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let grid = linspace(0.0, 1.0, 60);
    let p = SurrogatePrior::plain(grid, Rbf::for_domain(0.0, 1.0));
    let f = |x: f64| Ok((3.0 * x).sin() + 0.5 * x);
    let full = run_cbo(&p, &mut |x| f(x), -1.0, &cfg(10), None).unwrap();
    let first = run_cbo(&p, &mut |x| f(x), -1.0, &cfg(4), None).unwrap();
    let rest = run_cbo(&p, &mut |x| f(x), -1.0, &cfg(6), Some(&first)).unwrap();
    assert_eq!(full, rest);
}

#[test]
fn failing_oracle_returns_partial_trace() {
    let p = SurrogatePrior::plain(linspace(0.0, 1.0, 30), Rbf::for_domain(0.0, 1.0));
    let mut calls = 0;
    let mut oracle = |x: f64| {
        calls += 1;
        if calls == 3 {
            Err(Error::NonFinite("oracle"))
        } else {
            Ok(x)
        }
    };
    let err = run_cbo(&p, &mut oracle, 0.0, &cfg(5), None).unwrap_err();
    assert_eq!(err.partial.xs.len(), 2);
    assert!(run_cbo(&p, &mut |x| Ok(x), 0.0, &cfg(0), None).is_err());
}

#[test]
fn regret_is_non_increasing() {
    let mut t = BoTrace::new(0.0, Direction::Minimize, Rbf::for_domain(0.0, 1.0));
    let p = SurrogatePrior::plain(linspace(0.0, 1.0, 40), Rbf::for_domain(0.0, 1.0));
    t = run_cbo(&p, &mut |x| Ok((x - 0.8).abs()), 0.0, &cfg(8), Some(&t)).unwrap();
    assert!(t.regret.windows(2).all(|w| w[1] <= w[0]));
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
}

proptest! {
    #[test]
    fn expected_improvement_is_non_negative(
        m in -1e3..1e3f64,
        s in 0.0..1e3f64,
        inc in -1e3..1e3f64,
        maximize in any::<bool>(),
    ) {
        let d = if maximize { Direction::Maximize } else { Direction::Minimize };
        let ei = expected_improvement(m, s, inc, d);
        prop_assert!(ei >= 0.0 && ei.is_finite());
    }
}
