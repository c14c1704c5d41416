mod common;

use common::{normal_matrix, rng};
use impspec::calibration::{
    calibration_error, coverage_profile, default_alphas, optimize_spectral_measure, select_omega,
    split_halves, CalibrationGrid, EffectModel, ImpSpecModel, TrialIntervals,
};
use impspec::data::Problem;
use impspec::error::Result;
use impspec::gp::ModelParams;
use impspec::kernels::BaseScale;
use impspec::posterior::EvalPoint;
use impspec::simulators::{simulate, DgpName, DgpSpec};
use proptest::prelude::*;

/// Returns the same mean everywhere with a fixed variance.
struct Constant {
    variance: f64,
}

impl EffectModel for Constant {
    fn point_estimates(&self, _: &Problem, points: &[EvalPoint]) -> Result<Vec<f64>> {
        Ok(vec![0.3; points.len()])
    }

    fn moments(
        &self,
        _: &Problem,
        omegas: &[f64],
        points: &[EvalPoint],
    ) -> Result<Vec<Vec<(f64, f64)>>> {
        Ok(omegas
            .iter()
            .map(|w| vec![(0.0, self.variance * w); points.len()])
            .collect())
    }
}

fn ablation_problem(n: usize) -> Problem {
    simulate(&DgpSpec::new(DgpName::Ablation, n, 0))
        .unwrap()
        .problem()
        .unwrap()
}

fn points() -> Vec<EvalPoint> {
    [-0.5, 0.0, 0.5].iter().map(|z| EvalPoint::z_only(vec![*z])).collect()
}

#[test]
fn always_or_never_covering_intervals() {
    let problem = ablation_problem(40);
    let wide = CalibrationGrid::new(vec![0.999], points(), vec![1.0]).unwrap();
    let e = calibration_error(&Constant { variance: 1e12 }, &problem, 1.0, &wide, 5, 1).unwrap();
    assert!((e - 0.001).abs() < 1e-12);
    let narrow = CalibrationGrid::new(vec![0.001], points(), vec![1.0]).unwrap();
    let e = calibration_error(&Constant { variance: 0.0 }, &problem, 1.0, &narrow, 5, 1).unwrap();
    assert!((e - 0.001).abs() < 1e-12);
}

#[test]
fn split_is_disjoint_and_covering() {
    let problem = ablation_problem(41);
    let s = split_halves(&problem, 3).unwrap();
    let mut all1: Vec<usize> = s.a1.iter().chain(&s.b1).copied().collect();
    all1.sort();
    assert_eq!(all1, (0..problem.n1()).collect::<Vec<_>>());
    let mut all2: Vec<usize> = s.a2.iter().chain(&s.b2).copied().collect();
    all2.sort();
    assert_eq!(all2, (0..problem.n2()).collect::<Vec<_>>());
    assert_eq!(s, split_halves(&problem, 3).unwrap());
    assert_ne!(s, split_halves(&problem, 4).unwrap());
}

#[test]
fn frozen_model_error_is_bounded_and_reproducible() {
    let problem = ablation_problem(100);
    let model = ImpSpecModel::frozen(ModelParams::initial(&problem));
    let grid = CalibrationGrid::new(default_alphas(), points(), vec![1.0]).unwrap();
    let a = calibration_error(&model, &problem, 1.0, &grid, 20, 0).unwrap();
    let b = calibration_error(&model, &problem, 1.0, &grid, 20, 0).unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(a, b);
}

#[test]
fn omega_search() {
    let problem = ablation_problem(60);
    let model = ImpSpecModel::frozen(ModelParams::initial(&problem));
    let single = CalibrationGrid::new(default_alphas(), points(), vec![4.0]).unwrap();
    let c = optimize_spectral_measure(&model, &problem, &single, BaseScale::Variance, 3, 0).unwrap();
    assert_eq!(c.omega, 4.0);
    assert_eq!(c.measure.scale, 4.0);

    let grid = CalibrationGrid::new(default_alphas(), points(), vec![0.25, 1.0, 4.0]).unwrap();
    let c = optimize_spectral_measure(&model, &problem, &grid, BaseScale::Variance, 5, 0).unwrap();
    let best = c.errors.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let chosen = c.errors.iter().find(|e| e.0 == c.omega).unwrap().1;
    assert_eq!(chosen, best);
}

#[test]
fn omega_ties_prefer_unit_scale() {
    assert_eq!(select_omega(&[(4.0, 0.1), (1.0, 0.1), (0.25, 0.3)]), Some(1.0));
    assert_eq!(select_omega(&[(1.0, f64::NAN), (2.0, f64::INFINITY)]), None);
}

#[test]
fn bad_configuration_is_rejected() {
    assert!(CalibrationGrid::new(vec![], points(), vec![1.0]).is_err());
    assert!(CalibrationGrid::new(vec![0.5], vec![], vec![1.0]).is_err());
    assert!(CalibrationGrid::new(vec![0.5], points(), vec![-1.0]).is_err());
    let problem = ablation_problem(40);
    let grid = CalibrationGrid::new(vec![0.5], points(), vec![1.0]).unwrap();
    assert!(calibration_error(&Constant { variance: 1.0 }, &problem, 1.0, &grid, 0, 0).is_err());
    let tiny = problem.select(&[0, 1, 2], &[0, 1, 2]);
    assert!(split_halves(&tiny, 0).is_err());
}

fn gaussian_trials(n_trials: usize, n_points: usize, seed: u64) -> Vec<TrialIntervals> {
    let mut r = rng(seed);
    (0..n_trials)
        .map(|_| {
            let sd = normal_matrix(&mut r, n_points, 1).map(|v| 0.5 + v.abs());
            let mean = normal_matrix(&mut r, n_points, 1);
            let noise = normal_matrix(&mut r, n_points, 1);
            TrialIntervals {
                mean: mean.iter().copied().collect(),
                variance: sd.iter().map(|s| s * s).collect(),
                truth: (0..n_points).map(|i| mean[i] + sd[i] * noise[i]).collect(),
            }
        })
        .collect()
}

#[test]
fn correctly_specified_intervals_are_calibrated() {
    let trials = gaussian_trials(200, 10, 5);
    let p = coverage_profile(&trials, &default_alphas(), 50, 1).unwrap();
    let worst = p
        .coverage
        .iter()
        .zip(&p.alphas)
        .map(|(c, a)| (c - a).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.07, "max coverage gap {worst}");
    assert!(p.error_band.0 <= p.error_band.1);
}

#[test]
fn profile_needs_two_trials_and_truth() {
    let trials = gaussian_trials(1, 3, 6);
    assert!(coverage_profile(&trials, &default_alphas(), 0, 0).is_err());
    let mut trials = gaussian_trials(3, 3, 6);
    trials[1].truth[0] = f64::NAN;
    assert!(coverage_profile(&trials, &default_alphas(), 0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coverage_is_monotone_in_alpha(seed in 0u64..10_000, trials in 2usize..30) {
        let t = gaussian_trials(trials, 4, seed);
        let p = coverage_profile(&t, &default_alphas(), 10, seed).unwrap();
        prop_assert!(p.coverage.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        prop_assert!(p.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!((0.0..=1.0).contains(&p.error));
        for a in 0..p.alphas.len() {
            prop_assert!(p.band_lower[a] <= p.band_upper[a]);
        }
    }
}
