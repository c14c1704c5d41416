//! Multi-trial benchmark orchestration: simulate, fit, calibrate, evaluate
//! against the oracle, aggregate.
//!
//! Trial `t` draws everything from `seeds::derive(seed, t)`, so dropping or
//! reordering trials never changes another trial's data. Calibration errors
//! are cross-trial: per point and level the coverage over trials is compared
//! with α before averaging over points.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bayesimp, BayesImp, SamplingGp};
use crate::calibration::{
    coverage_profile, optimize_spectral_measure, CalibrationGrid, CoverageProfile, ImpSpecModel,
    TrialIntervals,
};
use crate::cbo::{
    bayesimp_curve, impspec_curve, plugin_curve, run_cbo, BoConfig, BoTrace, CboAbort, Curve,
    Direction, PriorKind, Rbf, SurrogatePrior,
};
use crate::data::Problem;
use crate::error::{Error, Result};
use crate::gp::{fit, FittedModel, ModelParams};
use crate::kernels::{BaseScale, SpectralMeasure};
use crate::posterior::{EvalPoint, Posterior};
use crate::seeds;
use crate::simulators::{
    ablation, linspace, oracle_effect, simulate_for, DgpSpec, OracleValues, Target,
};

pub mod config;
pub mod output;

pub use config::{BenchmarkConfig, ExperimentName};
pub use output::{emit_outputs, read_rows_csv, EmitStatus};

/// Fraction of failed trials tolerated before a run aborts.
pub const TRIAL_FAILURE_BUDGET: f64 = 0.2;

/// Synthetic benchmark: `|d|` at most this is in distribution.
pub const SYNTHETIC_ID_RADIUS: f64 = 2.0;
/// Synthetic benchmark: `|d|` at least this is out of distribution.
pub const SYNTHETIC_OOD_RADIUS: f64 = 4.5;
/// Synthetic benchmark grid half-width.
pub const SYNTHETIC_GRID_RADIUS: f64 = 8.0;
/// Distance past the largest training D, in lengthscales, for the
/// variance-collapse check.
pub const COLLAPSE_OFFSET: f64 = 10.0;

const ORACLE_STREAM: u64 = u64::MAX;
const PROFILE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub method: String,
    pub subset: String,
    pub profile: CoverageProfile,
}

/// Posterior curve from one trial, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub method: String,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trial: usize,
    pub method: String,
    pub trace: BoTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkBundle {
    pub config: BenchmarkConfig,
    pub config_hash: String,
    pub trial_seeds: Vec<u64>,
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<Aggregate>,
    pub calibration: Vec<CalibrationSummary>,
    pub oracle: OracleValues,
    pub curves: Vec<CurveRecord>,
    pub traces: Vec<TraceRecord>,
    pub failures: Vec<TrialFailure>,
}

impl BenchmarkBundle {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn aggregate(&self, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.metric == metric)
    }

    pub fn calibration_error(&self, method: &str, subset: &str) -> Option<f64> {
        self.calibration
            .iter()
            .find(|c| c.method == method && c.subset == subset)
            .map(|c| c.profile.error)
    }

    /// Per-trial values of one metric, in trial order.
    pub fn values(&self, method: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| (r.trial, r.value))
            .collect()
    }
}

#[derive(Debug, Default)]
struct TrialOutcome {
    rows: Vec<TrialRow>,
    intervals: Vec<(String, String, TrialIntervals)>,
    curves: Vec<CurveRecord>,
    traces: Vec<TraceRecord>,
}

impl TrialOutcome {
    fn row(&mut self, trial: usize, method: &str, metric: &str, value: f64) {
        self.rows.push(TrialRow {
            trial,
            method: method.into(),
            metric: metric.into(),
            value,
        });
    }
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    seeds::derive(master, trial as u64)
}

/// Mean and sample standard deviation per (method, metric), in order of
/// first appearance.
pub fn aggregate(rows: &[TrialRow]) -> Vec<Aggregate> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.metric.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Aggregate {
                method: key.0,
                metric: key.1,
                mean,
                std,
                n,
            }
        })
        .collect()
}

fn rmse(est: &[f64], truth: &[f64], idx: &[usize]) -> f64 {
    (idx.iter()
        .map(|&i| (est[i] - truth[i]).powi(2))
        .sum::<f64>()
        / idx.len() as f64)
        .sqrt()
}

fn subset<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn intervals(mv: &[(f64, f64)], truth: &[f64], idx: &[usize]) -> TrialIntervals {
    TrialIntervals {
        mean: idx.iter().map(|&i| mv[i].0).collect(),
        variance: idx.iter().map(|&i| mv[i].1).collect(),
        truth: subset(truth, idx),
    }
}

fn curve_record(method: &str, grid: &[f64], mv: &[(f64, f64)]) -> CurveRecord {
    CurveRecord {
        method: method.into(),
        grid: grid.to_vec(),
        mean: mv.iter().map(|m| m.0).collect(),
        variance: mv.iter().map(|m| m.1).collect(),
    }
}

fn pointwise(post: &Posterior<'_>, points: &[EvalPoint]) -> Result<Vec<(f64, f64)>> {
    let j = post.joint(points)?;
    (0..points.len())
        .map(|i| Ok((j.mean[i], j.moments(i, points[i].clone())?.variance)))
        .collect()
}

fn target_of(exp: ExperimentName) -> Target {
    match exp {
        ExperimentName::Ablation => Target::AblationAte,
        ExperimentName::Synthetic | ExperimentName::SyntheticCboBackdoor => {
            Target::SyntheticCate { b: 0.0 }
        }
        ExperimentName::SyntheticCboFrontdoor => Target::SyntheticAtt { b_prime: 0.0 },
        ExperimentName::HealthcareCbo => Target::HealthcareAte,
    }
}

/// Ground truth on the experiment's evaluation grid.
pub fn benchmark_oracle(cfg: &BenchmarkConfig) -> Result<OracleValues> {
    let target = target_of(cfg.experiment);
    let g = cfg.grid_size;
    let grid = match cfg.experiment {
        ExperimentName::Ablation => linspace(0.0, 1.0, g),
        ExperimentName::Synthetic => linspace(-SYNTHETIC_GRID_RADIUS, SYNTHETIC_GRID_RADIUS, g),
        _ => {
            let (lo, hi) = target.domain();
            linspace(lo, hi, g)
        }
    };
    if cfg.experiment == ExperimentName::Ablation {
        return Ok(OracleValues {
            values: grid.iter().map(|&z| ablation::exact_effect(z)).collect(),
            stderr: vec![0.0; g],
            grid,
        });
    }
    oracle_effect(
        &target,
        &grid,
        cfg.oracle_mc,
        seeds::derive(cfg.seed, ORACLE_STREAM),
        cfg.propensity,
    )
}

fn simulate_problem(cfg: &BenchmarkConfig, ts: u64) -> Result<Problem> {
    let target = target_of(cfg.experiment);
    let spec = DgpSpec {
        name: target.dgp(),
        n: cfg.n,
        seed: seeds::derive(ts, 0),
        propensity: cfg.propensity,
    };
    simulate_for(&spec, &target)?.problem()
}

fn fit_impspec(cfg: &BenchmarkConfig, problem: &Problem) -> Result<ModelParams> {
    fit(problem, &ModelParams::initial(problem), &cfg.adam)
}

fn calibrate(
    cfg: &BenchmarkConfig,
    problem: &Problem,
    params: &ModelParams,
    points: Vec<EvalPoint>,
    seed: u64,
) -> Result<f64> {
    let mut model = ImpSpecModel::frozen(params.clone());
    if cfg.refit_boot {
        model.refit = Some(cfg.adam.clone());
    }
    let grid = CalibrationGrid::new(cfg.alphas.clone(), points, cfg.omegas.clone())?;
    Ok(optimize_spectral_measure(
        &model,
        problem,
        &grid,
        BaseScale::Variance,
        cfg.n_boot,
        seed,
    )?
    .omega)
}

fn ablation_trial(
    cfg: &BenchmarkConfig,
    oracle: &OracleValues,
    trial: usize,
) -> Result<TrialOutcome> {
    let ts = trial_seed(cfg.seed, trial);
    let problem = simulate_problem(cfg, ts)?;
    let params = fit_impspec(cfg, &problem)?;
    let points: Vec<EvalPoint> = oracle
        .grid
        .iter()
        .map(|&z| EvalPoint::z_only(vec![z]))
        .collect();
    let omega = calibrate(cfg, &problem, &params, points.clone(), seeds::derive(ts, 1))?;

    let model = FittedModel::new(problem.clone(), params.clone())?;
    let base = SpectralMeasure::from_points(&problem.v1, 1.0, BaseScale::Variance)?;
    let mut post = Posterior::new(&model, &base)?;
    let nocal = pointwise(&post, &points)?;
    post.set_measure(
        &base.with_scale(omega)?,
        crate::kernels::Smoothing::ClosedForm,
    )?;
    let cal = pointwise(&post, &points)?;

    let bip = bayesimp::fit(
        &problem,
        &ModelParams::initial(&problem),
        &cfg.adam,
        cfg.opt_varsigma,
    )?;
    let bimp = BayesImp::new(&problem, &bip)?.pointwise(&points)?;
    let sgp = SamplingGp::fit(&problem, &params, &cfg.adam)?.effect(
        &points,
        cfg.sampling_gp_samples,
        seeds::derive(ts, 2),
    )?;

    let truth = &oracle.values;
    let all: Vec<usize> = (0..truth.len()).collect();
    let mut out = TrialOutcome::default();
    for (method, mv) in [
        ("impspec", &cal),
        ("impspec_nocal", &nocal),
        ("bayesimp", &bimp),
        ("sampling_gp", &sgp),
    ] {
        let means: Vec<f64> = mv.iter().map(|m| m.0).collect();
        out.row(trial, method, "rmse", rmse(&means, truth, &all));
        out.intervals
            .push((method.into(), "all".into(), intervals(mv, truth, &all)));
        out.curves.push(curve_record(method, &oracle.grid, mv));
    }
    out.row(trial, "impspec", "omega", omega);
    Ok(out)
}

fn synthetic_trial(
    cfg: &BenchmarkConfig,
    oracle: &OracleValues,
    trial: usize,
) -> Result<TrialOutcome> {
    let ts = trial_seed(cfg.seed, trial);
    let problem = simulate_problem(cfg, ts)?;
    let params = fit_impspec(cfg, &problem)?;
    let grid = &oracle.grid;
    let point = |d: f64| EvalPoint::new(vec![d, 0.0], vec![0.0]);
    let points: Vec<EvalPoint> = grid.iter().map(|&d| point(d)).collect();
    let id: Vec<usize> = (0..grid.len())
        .filter(|&i| grid[i].abs() <= SYNTHETIC_ID_RADIUS)
        .collect();
    let ood: Vec<usize> = (0..grid.len())
        .filter(|&i| grid[i].abs() >= SYNTHETIC_OOD_RADIUS)
        .collect();
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Config(
            "grid too coarse for in/out-of-distribution subsets".into(),
        ));
    }
    let omega = calibrate(
        cfg,
        &problem,
        &params,
        subset(&points, &id),
        seeds::derive(ts, 1),
    )?;

    let model = FittedModel::new(problem.clone(), params.clone())?;
    let measure = SpectralMeasure::from_points(&problem.v1, omega, BaseScale::Variance)?;
    let post = Posterior::new(&model, &measure)?;
    let imp = pointwise(&post, &points)?;

    let bip = bayesimp::fit(
        &problem,
        &ModelParams::initial(&problem),
        &cfg.adam,
        cfg.opt_varsigma,
    )?;
    let bmodel = BayesImp::new(&problem, &bip)?;
    let bimp = bmodel.pointwise(&points)?;
    let sgp = SamplingGp::fit(&problem, &params, &cfg.adam)?.effect(
        &points,
        cfg.sampling_gp_samples,
        seeds::derive(ts, 2),
    )?;

    let truth = &oracle.values;
    let all: Vec<usize> = (0..truth.len()).collect();
    let mut out = TrialOutcome::default();
    for (method, mv) in [
        ("impspec", &imp),
        ("bayesimp", &bimp),
        ("sampling_gp", &sgp),
    ] {
        let means: Vec<f64> = mv.iter().map(|m| m.0).collect();
        out.row(trial, method, "rmse", rmse(&means, truth, &all));
        out.row(trial, method, "rmse_id", rmse(&means, truth, &id));
        out.intervals
            .push((method.into(), "id".into(), intervals(mv, truth, &id)));
        out.intervals
            .push((method.into(), "ood".into(), intervals(mv, truth, &ood)));
        out.curves.push(curve_record(method, grid, mv));
    }
    out.row(trial, "impspec", "omega", omega);

    // variance collapse far outside the training support of D
    let w1 = problem.w1.as_ref().expect("synthetic CATE has W");
    let d_train: Vec<f64> = w1.column(0).iter().copied().collect();
    let d_max = d_train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let in_sample: Vec<EvalPoint> = d_train.iter().map(|&d| point(d)).collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    };

    let l_imp = params.kw.as_ref().map_or(1.0, |k| k.lengthscales[0]);
    let far = post.moments(&point(d_max + COLLAPSE_OFFSET * l_imp))?;
    let imp_med = median(pointwise(&post, &in_sample)?.iter().map(|m| m.1).collect());
    out.row(trial, "impspec", "ood_var_over_s3", far.variance / far.s3);
    out.row(trial, "impspec", "ood_var_ratio", far.variance / imp_med);

    let l_b = bip.model.kw.as_ref().map_or(1.0, |k| k.lengthscales[0]);
    let far_b = bmodel.moments(&point(d_max + COLLAPSE_OFFSET * l_b))?;
    let b_med = median(bmodel.pointwise(&in_sample)?.iter().map(|m| m.1).collect());
    out.row(trial, "bayesimp", "ood_var_ratio", far_b.variance / b_med);
    Ok(out)
}

/// The intervention curve and optimisation direction of a BO task.
pub fn cbo_task(exp: ExperimentName, problem: &Problem) -> Result<(Curve, Direction)> {
    Ok(match exp {
        ExperimentName::HealthcareCbo => {
            // statin is the first Z column; average over (age, bmi)
            let m: Vec<Vec<f64>> = (0..problem.n2())
                .map(|i| vec![problem.z2[(i, 1)], problem.z2[(i, 2)]])
                .collect();
            (
                Curve::Averaged {
                    w: Vec::new(),
                    z_dim: 0,
                    marginal: m,
                },
                Direction::Minimize,
            )
        }
        ExperimentName::SyntheticCboBackdoor => (
            Curve::Direct {
                w: vec![0.0, 0.0],
                z: vec![0.0],
                w_dims: vec![0],
                z_dims: Vec::new(),
            },
            Direction::Minimize,
        ),
        ExperimentName::SyntheticCboFrontdoor => (
            Curve::Direct {
                w: vec![0.0],
                z: vec![0.0],
                w_dims: Vec::new(),
                z_dims: vec![0],
            },
            Direction::Maximize,
        ),
        other => return Err(Error::Config(format!("{other} is not a BO task"))),
    })
}

/// Builds the surrogate prior of `kind` on `grid`.
pub fn build_prior(
    kind: PriorKind,
    problem: &Problem,
    params: &ModelParams,
    bayesimp_params: Option<&bayesimp::BayesImpParams>,
    curve: &Curve,
    grid: &[f64],
    rbf: Rbf,
) -> Result<SurrogatePrior> {
    match kind {
        PriorKind::Plain => Ok(SurrogatePrior::plain(grid.to_vec(), rbf)),
        PriorKind::Impspec => {
            let model = FittedModel::new(problem.clone(), params.clone())?;
            let measure = SpectralMeasure::from_points(&problem.v1, 1.0, BaseScale::Variance)?;
            let post = Posterior::new(&model, &measure)?;
            let (m, c) = impspec_curve(&post, curve, grid)?;
            SurrogatePrior::from_moments(kind, grid.to_vec(), m, c, rbf)
        }
        PriorKind::Bayesimp => {
            let bp = bayesimp_params.ok_or_else(|| {
                Error::Config("BayesIMP prior needs its fitted parameters".into())
            })?;
            let b = BayesImp::new(problem, bp)?;
            let (m, c) = bayesimp_curve(&b, curve, grid)?;
            SurrogatePrior::from_moments(kind, grid.to_vec(), m, c, rbf)
        }
        PriorKind::CboPlugin => {
            let (m, v) = plugin_curve(problem, params, curve, grid)?;
            SurrogatePrior::from_plugin(grid.to_vec(), m, v, rbf)
        }
    }
}

pub const CBO_METHODS: [PriorKind; 4] = [
    PriorKind::Impspec,
    PriorKind::Bayesimp,
    PriorKind::CboPlugin,
    PriorKind::Plain,
];

/// Optimum of the oracle values in the given direction.
pub fn optimum(values: &[f64], direction: Direction) -> f64 {
    let it = values.iter().copied();
    match direction {
        Direction::Minimize => it.fold(f64::INFINITY, f64::min),
        Direction::Maximize => it.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Oracle lookup on grid values.
pub fn grid_oracle(oracle: &OracleValues) -> impl FnMut(f64) -> Result<f64> + '_ {
    move |x| {
        oracle
            .grid
            .iter()
            .position(|g| *g == x)
            .map(|i| oracle.values[i])
            .ok_or_else(|| Error::InvalidParameter(format!("{x} is not on the oracle grid")))
    }
}

struct CboSetup {
    problem: Problem,
    params: ModelParams,
    bip: Option<bayesimp::BayesImpParams>,
    curve: Curve,
    direction: Direction,
    rbf: Rbf,
}

impl CboSetup {
    fn new(cfg: &BenchmarkConfig, trial: usize, with_bayesimp: bool) -> Result<Self> {
        let ts = trial_seed(cfg.seed, trial);
        let problem = simulate_problem(cfg, ts)?;
        let params = fit_impspec(cfg, &problem)?;
        let bip = if with_bayesimp {
            Some(bayesimp::fit(
                &problem,
                &ModelParams::initial(&problem),
                &cfg.adam,
                cfg.opt_varsigma,
            )?)
        } else {
            None
        };
        let (curve, direction) = cbo_task(cfg.experiment, &problem)?;
        let (lo, hi) = target_of(cfg.experiment).domain();
        Ok(Self {
            problem,
            params,
            bip,
            curve,
            direction,
            rbf: Rbf::for_domain(lo, hi),
        })
    }

    fn prior(&self, kind: PriorKind, grid: &[f64]) -> Result<SurrogatePrior> {
        build_prior(
            kind,
            &self.problem,
            &self.params,
            self.bip.as_ref(),
            &self.curve,
            grid,
            self.rbf,
        )
    }

    fn bo_config(&self, cfg: &BenchmarkConfig) -> BoConfig {
        BoConfig {
            iters: cfg.bo_iters,
            refit_every: cfg.refit_every,
            direction: self.direction,
        }
    }
}

/// Runs one BO method on trial `trial` of a BO experiment, optionally
/// continuing a previous trace for another `cfg.bo_iters` iterations.
pub fn run_cbo_trial(
    cfg: &BenchmarkConfig,
    oracle: &OracleValues,
    kind: PriorKind,
    trial: usize,
    resume: Option<&BoTrace>,
) -> std::result::Result<BoTrace, CboAbort> {
    let fail = |source: Error| CboAbort {
        partial: resume.cloned().unwrap_or_else(|| {
            BoTrace::new(f64::NAN, Direction::Minimize, Rbf::for_domain(0.0, 1.0))
        }),
        source,
    };
    if !cfg.experiment.is_cbo() {
        return Err(fail(Error::Config(format!(
            "{} is not a BO task",
            cfg.experiment
        ))));
    }
    let setup = CboSetup::new(cfg, trial, kind == PriorKind::Bayesimp).map_err(fail)?;
    let prior = setup.prior(kind, &oracle.grid).map_err(fail)?;
    let best = optimum(&oracle.values, setup.direction);
    run_cbo(
        &prior,
        &mut grid_oracle(oracle),
        best,
        &setup.bo_config(cfg),
        resume,
    )
}

fn cbo_trial(cfg: &BenchmarkConfig, oracle: &OracleValues, trial: usize) -> Result<TrialOutcome> {
    let setup = CboSetup::new(cfg, trial, true)?;
    let best = optimum(&oracle.values, setup.direction);
    let bo = setup.bo_config(cfg);
    let mut out = TrialOutcome::default();
    for kind in CBO_METHODS {
        let prior = setup.prior(kind, &oracle.grid)?;
        if trial == 0 {
            out.curves.push(CurveRecord {
                method: kind.to_string(),
                grid: oracle.grid.clone(),
                mean: prior.mean.iter().copied().collect(),
                variance: prior.full_cov().diagonal().iter().copied().collect(),
            });
        }
        let trace =
            run_cbo(&prior, &mut grid_oracle(oracle), best, &bo, None).map_err(|a| a.source)?;
        let name = kind.to_string();
        out.row(trial, &name, "cumulative_regret", trace.cumulative_regret());
        out.row(
            trial,
            &name,
            "final_regret",
            *trace.regret.last().unwrap_or(&0.0),
        );
        out.traces.push(TraceRecord {
            trial,
            method: name,
            trace,
        });
    }
    Ok(out)
}

fn run_trial(cfg: &BenchmarkConfig, oracle: &OracleValues, trial: usize) -> Result<TrialOutcome> {
    match cfg.experiment {
        ExperimentName::Ablation => ablation_trial(cfg, oracle, trial),
        ExperimentName::Synthetic => synthetic_trial(cfg, oracle, trial),
        _ => cbo_trial(cfg, oracle, trial),
    }
}

/// Runs all trials on `jobs` threads and aggregates.
pub fn run_benchmark(cfg: &BenchmarkConfig, jobs: usize) -> Result<BenchmarkBundle> {
    cfg.validate()?;
    let oracle = benchmark_oracle(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Result<TrialOutcome>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &oracle, t))
            .collect()
    });

    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut grouped: Vec<((String, String), Vec<TrialIntervals>)> = Vec::new();
    let mut curves = Vec::new();
    let mut traces = Vec::new();
    for (trial, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                rows.extend(o.rows);
                for (method, sub, iv) in o.intervals {
                    let key = (method, sub);
                    match grouped.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push(iv),
                        None => grouped.push((key, vec![iv])),
                    }
                }
                if curves.is_empty() {
                    curves = o.curves;
                }
                traces.extend(o.traces);
            }
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                failures.push(TrialFailure {
                    trial,
                    error: e.to_string(),
                });
            }
        }
    }
    if failures.len() as f64 > TRIAL_FAILURE_BUDGET * cfg.trials as f64 {
        return Err(Error::FailureBudget {
            failed: failures.len(),
            total: cfg.trials,
        });
    }
    let calibration = grouped
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|((method, sub), v)| {
            let profile = coverage_profile(
                &v,
                &cfg.alphas,
                cfg.outer_boot,
                seeds::derive(cfg.seed, PROFILE_STREAM),
            )?;
            Ok(CalibrationSummary {
                method,
                subset: sub,
                profile,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkBundle {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        trial_seeds: (0..cfg.trials).map(|t| trial_seed(cfg.seed, t)).collect(),
        aggregates: aggregate(&rows),
        rows,
        calibration,
        oracle,
        curves,
        traces,
        failures,
    })
}

/// `(a, b)` values of one metric for trials present in both methods.
pub fn paired(bundle: &BenchmarkBundle, a: &str, b: &str, metric: &str) -> Vec<(f64, f64)> {
    let vb: BTreeMap<usize, f64> = bundle.values(b, metric).into_iter().collect();
    bundle
        .values(a, metric)
        .into_iter()
        .filter_map(|(t, x)| vb.get(&t).map(|y| (x, *y)))
        .collect()
}
