//! Spectral-measure calibration by sample splitting and the empirical
//! bootstrap, and cross-trial coverage profiles against an oracle.
//!
//! Intervals are central Gaussian intervals `m ± q_{(1+α)/2}·s`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::PlugIn;
use crate::data::Problem;
use crate::error::{Error, Result};
use crate::gp::{fit, AdamConfig, FittedModel, ModelParams};
use crate::kernels::{BaseScale, Smoothing, SpectralMeasure};
use crate::posterior::{normal_quantile, EvalPoint, Posterior};
use crate::seeds;

/// Fraction of failed bootstrap replicates tolerated.
pub const BOOT_FAILURE_BUDGET: f64 = 0.1;

/// `ω ∈ 2^{-4,-2,0,2,4}`.
pub const DEFAULT_OMEGAS: [f64; 5] = [0.0625, 0.25, 1.0, 4.0, 16.0];

/// `α = 0.01, 0.02, …, 0.99`.
pub fn default_alphas() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub alphas: Vec<f64>,
    pub eval_points: Vec<EvalPoint>,
    pub omega_candidates: Vec<f64>,
}

impl CalibrationGrid {
    pub fn new(
        alphas: Vec<f64>,
        eval_points: Vec<EvalPoint>,
        omega_candidates: Vec<f64>,
    ) -> Result<Self> {
        let g = Self {
            alphas,
            eval_points,
            omega_candidates,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        validate_alphas(&self.alphas)?;
        if self.eval_points.is_empty() {
            return Err(Error::Config(
                "calibration grid has no evaluation points".into(),
            ));
        }
        if self
            .omega_candidates
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::Config(
                "ω candidates must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Config("empty α grid".into()));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::Config("α values must lie in (0, 1)".into()));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("α grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Interval half-width multipliers `q_{(1+α)/2}`.
fn half_widths(alphas: &[f64]) -> Vec<f64> {
    alphas
        .iter()
        .map(|a| normal_quantile(0.5 + 0.5 * a))
        .collect()
}

/// A model that can be refit on resampled data.
pub trait EffectModel: Sync {
    /// Point estimates of the effect at `points`, fit on `problem`.
    fn point_estimates(&self, problem: &Problem, points: &[EvalPoint]) -> Result<Vec<f64>>;

    /// Means and variances at `points` for each scale in `omegas`, fit on
    /// `problem`. Outer index is the scale.
    fn moments(
        &self,
        problem: &Problem,
        omegas: &[f64],
        points: &[EvalPoint],
    ) -> Result<Vec<Vec<(f64, f64)>>>;
}

/// The closed-form posterior with hyperparameters frozen at `params`
/// unless `refit` is set.
#[derive(Debug, Clone)]
pub struct ImpSpecModel {
    pub params: ModelParams,
    pub base: BaseScale,
    pub smoothing: Smoothing,
    pub refit: Option<AdamConfig>,
}

impl ImpSpecModel {
    pub fn frozen(params: ModelParams) -> Self {
        Self {
            params,
            base: BaseScale::Variance,
            smoothing: Smoothing::ClosedForm,
            refit: None,
        }
    }

    fn params_for(&self, problem: &Problem) -> Result<ModelParams> {
        match &self.refit {
            Some(cfg) => fit(problem, &self.params, cfg),
            None => Ok(self.params.clone()),
        }
    }
}

impl EffectModel for ImpSpecModel {
    fn point_estimates(&self, problem: &Problem, points: &[EvalPoint]) -> Result<Vec<f64>> {
        let params = self.params_for(problem)?;
        PlugIn::new(problem, &params)?.evaluate_all(points)
    }

    fn moments(
        &self,
        problem: &Problem,
        omegas: &[f64],
        points: &[EvalPoint],
    ) -> Result<Vec<Vec<(f64, f64)>>> {
        let params = self.params_for(problem)?;
        let model = FittedModel::new(problem.clone(), params)?;
        let base = SpectralMeasure::from_points(&problem.v1, 1.0, self.base)?;
        let mut post: Option<Posterior<'_>> = None;
        omegas
            .iter()
            .map(|&omega| {
                let measure = base.with_scale(omega)?;
                let post = match &mut post {
                    Some(p) => {
                        p.set_measure(&measure, self.smoothing)?;
                        p
                    }
                    None => {
                        post.insert(Posterior::with_smoothing(&model, &measure, self.smoothing)?)
                    }
                };
                let j = post.joint(points)?;
                (0..points.len())
                    .map(|i| Ok((j.mean[i], j.variance(i)?)))
                    .collect()
            })
            .collect()
    }
}

/// Index sets of a 50:50 split, per table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub a1: Vec<usize>,
    pub b1: Vec<usize>,
    pub a2: Vec<usize>,
    pub b2: Vec<usize>,
}

fn halve(n: usize, rng: &mut seeds::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let b = idx.split_off(n / 2);
    (idx, b)
}

pub fn split_halves(problem: &Problem, seed: u64) -> Result<Split> {
    if problem.n1() < 4 || (problem.fusion && problem.n2() < 4) {
        return Err(Error::InvalidParameter(
            "too few rows for a 50:50 split".into(),
        ));
    }
    let mut rng = seeds::sub_rng(seed, 0);
    let (a1, b1) = halve(problem.n1(), &mut rng);
    let (a2, b2) = if problem.fusion {
        halve(problem.n2(), &mut rng)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Split { a1, b1, a2, b2 })
}

fn resample(rows: &[usize], rng: &mut seeds::Rng) -> Vec<usize> {
    (0..rows.len())
        .map(|_| rows[rng.random_range(0..rows.len())])
        .collect()
}

/// Calibration errors for every scale in `omegas`, sharing the split and
/// the bootstrap replicates.
pub fn calibration_errors(
    model: &dyn EffectModel,
    problem: &Problem,
    omegas: &[f64],
    points: &[EvalPoint],
    alphas: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_boot == 0 {
        return Err(Error::InvalidParameter("n_boot must be positive".into()));
    }
    if omegas.is_empty() || points.is_empty() {
        return Err(Error::Config(
            "need at least one ω candidate and one point".into(),
        ));
    }
    validate_alphas(alphas)?;
    let split = split_halves(problem, seed)?;
    debug_assert!(split.a1.iter().all(|i| !split.b1.contains(i)));
    debug_assert!(split.a2.iter().all(|i| !split.b2.contains(i)));
    let gamma_hat = model.point_estimates(&problem.select(&split.b1, &split.b2), points)?;
    let q = half_widths(alphas);

    // hits[o][p][a] summed over successful replicates
    let replicates: Vec<Result<Vec<Vec<Vec<u32>>>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeds::sub_rng(seed, 1 + b as u64);
            let r1 = resample(&split.a1, &mut rng);
            let r2 = resample(&split.a2, &mut rng);
            let m = model.moments(&problem.select(&r1, &r2), omegas, points)?;
            Ok(m.iter()
                .map(|per_point| {
                    per_point
                        .iter()
                        .zip(&gamma_hat)
                        .map(|(&(mean, var), g)| {
                            let dev = (g - mean).abs();
                            let sd = var.sqrt();
                            q.iter().map(|qa| u32::from(dev <= qa * sd)).collect()
                        })
                        .collect()
                })
                .collect())
        })
        .collect();

    let mut hits = vec![vec![vec![0u32; alphas.len()]; points.len()]; omegas.len()];
    let mut failed = 0;
    for r in replicates {
        match r {
            Ok(h) => {
                for (acc, rep) in hits.iter_mut().zip(h) {
                    for (ap, rp) in acc.iter_mut().zip(rep) {
                        for (a, r) in ap.iter_mut().zip(rp) {
                            *a += r;
                        }
                    }
                }
            }
            Err(e) if e.is_numerical() => {
                log::warn!("bootstrap replicate failed: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if failed as f64 > BOOT_FAILURE_BUDGET * n_boot as f64 {
        return Err(Error::FailureBudget {
            failed,
            total: n_boot,
        });
    }
    let ok = (n_boot - failed) as f64;
    let cells = (points.len() * alphas.len()) as f64;
    Ok(hits
        .iter()
        .map(|per_point| {
            per_point
                .iter()
                .flat_map(|row| {
                    row.iter()
                        .zip(alphas)
                        .map(|(h, a)| (*h as f64 / ok - a).abs())
                })
                .sum::<f64>()
                / cells
        })
        .collect())
}

/// Mean over points and levels of `|coverage − α|` for one measure scale.
pub fn calibration_error(
    model: &dyn EffectModel,
    problem: &Problem,
    omega: f64,
    grid: &CalibrationGrid,
    n_boot: usize,
    seed: u64,
) -> Result<f64> {
    grid.validate()?;
    Ok(calibration_errors(
        model,
        problem,
        &[omega],
        &grid.eval_points,
        &grid.alphas,
        n_boot,
        seed,
    )?[0])
}

/// Picks the scale with the lowest error; ties go to the scale closest to 1
/// on the log axis.
pub fn select_omega(scored: &[(f64, f64)]) -> Option<f64> {
    scored
        .iter()
        .filter(|(_, e)| e.is_finite())
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.ln().abs().total_cmp(&b.0.ln().abs()))
        })
        .map(|(w, _)| *w)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaChoice {
    pub omega: f64,
    pub measure: SpectralMeasure,
    /// `(ω, error)` per candidate.
    pub errors: Vec<(f64, f64)>,
}

pub fn optimize_spectral_measure(
    model: &dyn EffectModel,
    problem: &Problem,
    grid: &CalibrationGrid,
    base: BaseScale,
    n_boot: usize,
    seed: u64,
) -> Result<OmegaChoice> {
    grid.validate()?;
    let candidates = &grid.omega_candidates;
    if candidates.is_empty() {
        return Err(Error::Config("no ω candidates".into()));
    }
    let errors: Vec<(f64, f64)> = if candidates.len() == 1 {
        vec![(candidates[0], f64::NAN)]
    } else {
        let e = calibration_errors(
            model,
            problem,
            candidates,
            &grid.eval_points,
            &grid.alphas,
            n_boot,
            seed,
        )?;
        candidates.iter().copied().zip(e).collect()
    };
    let omega = if candidates.len() == 1 {
        candidates[0]
    } else {
        select_omega(&errors).ok_or_else(|| Error::NonFinite("calibration error"))?
    };
    Ok(OmegaChoice {
        omega,
        measure: SpectralMeasure::from_points(&problem.v1, omega, base)?,
        errors,
    })
}

/// Intervals from one trial against the true effect at the same points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialIntervals {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageProfile {
    pub alphas: Vec<f64>,
    /// Coverage per α, averaged over points.
    pub coverage: Vec<f64>,
    /// `|coverage − α|` per α, taken per point before averaging.
    pub abs_error: Vec<f64>,
    pub band_lower: Vec<f64>,
    pub band_upper: Vec<f64>,
    /// Mean of `abs_error` over α.
    pub error: f64,
    pub error_band: (f64, f64),
}

/// `(coverage, abs_error)` per α from per-trial hit tables `[trial][point][α]`.
fn profile_of(hits: &[Vec<Vec<bool>>], which: &[usize], alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n_points = hits[0].len();
    let nt = which.len() as f64;
    let mut coverage = vec![0.0; alphas.len()];
    let mut abs_error = vec![0.0; alphas.len()];
    for p in 0..n_points {
        for (a, alpha) in alphas.iter().enumerate() {
            let c = which.iter().filter(|&&t| hits[t][p][a]).count() as f64 / nt;
            coverage[a] += c / n_points as f64;
            abs_error[a] += (c - alpha).abs() / n_points as f64;
        }
    }
    (coverage, abs_error)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cross-trial coverage of central intervals with percentile bootstrap
/// bands over trials.
pub fn coverage_profile(
    trials: &[TrialIntervals],
    alphas: &[f64],
    n_outer_boot: usize,
    seed: u64,
) -> Result<CoverageProfile> {
    validate_alphas(alphas)?;
    if trials.len() < 2 {
        return Err(Error::InvalidParameter(
            "coverage profile needs at least two trials".into(),
        ));
    }
    let n_points = trials[0].mean.len();
    if n_points == 0 {
        return Err(Error::InvalidParameter("no evaluation points".into()));
    }
    for t in trials {
        if t.mean.len() != n_points || t.variance.len() != n_points {
            return Err(Error::DimensionMismatch {
                expected: n_points,
                got: t.mean.len().min(t.variance.len()),
            });
        }
        if t.truth.len() != n_points || t.truth.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingColumn("oracle effect values".into()));
        }
    }
    let q = half_widths(alphas);
    let hits: Vec<Vec<Vec<bool>>> = trials
        .iter()
        .map(|t| {
            (0..n_points)
                .map(|p| {
                    let dev = (t.truth[p] - t.mean[p]).abs();
                    let sd = t.variance[p].max(0.0).sqrt();
                    q.iter().map(|qa| dev <= qa * sd).collect()
                })
                .collect()
        })
        .collect();
    let all: Vec<usize> = (0..trials.len()).collect();
    let (coverage, abs_error) = profile_of(&hits, &all, alphas);
    let error = abs_error.iter().sum::<f64>() / alphas.len() as f64;

    let (band_lower, band_upper, error_band) = if n_outer_boot == 0 {
        (abs_error.clone(), abs_error.clone(), (error, error))
    } else {
        let mut rng = seeds::sub_rng(seed, 0);
        let boots: Vec<Vec<f64>> = (0..n_outer_boot)
            .map(|_| {
                let which = resample(&all, &mut rng);
                profile_of(&hits, &which, alphas).1
            })
            .collect();
        let mut lower = Vec::with_capacity(alphas.len());
        let mut upper = Vec::with_capacity(alphas.len());
        for a in 0..alphas.len() {
            let mut col: Vec<f64> = boots.iter().map(|b| b[a]).collect();
            col.sort_by(f64::total_cmp);
            lower.push(percentile(&col, 0.025));
            upper.push(percentile(&col, 0.975));
        }
        let mut errs: Vec<f64> = boots
            .iter()
            .map(|b| b.iter().sum::<f64>() / alphas.len() as f64)
            .collect();
        errs.sort_by(f64::total_cmp);
        (
            lower,
            upper,
            (percentile(&errs, 0.025), percentile(&errs, 0.975)),
        )
    };
    Ok(CoverageProfile {
        alphas: alphas.to_vec(),
        coverage,
        abs_error,
        band_lower,
        band_upper,
        error,
        error_band,
    })
}
