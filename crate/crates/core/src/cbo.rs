//! Causal Bayesian optimisation over a one-dimensional intervention grid.
//!
//! Every surrogate is a GP on the grid whose prior is a method's effect
//! posterior (mean, covariance) plus an additive Gaussian kernel `k_RBF`.
//! Observations are noise-free up to a `1e-6` jitter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::baselines::{BayesImp, PlugIn};
use crate::data::Problem;
use crate::error::{Error, Result};
use crate::gp::ModelParams;
use crate::linalg::{add_diagonal, symmetrize, Factor};
use crate::posterior::{EvalPoint, Posterior};

pub const OBSERVATION_JITTER: f64 = 1e-6;
pub const GRID_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Impspec,
    Bayesimp,
    CboPlugin,
    Plain,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impspec" => Ok(Self::Impspec),
            "bayesimp" => Ok(Self::Bayesimp),
            "cbo" | "cbo_plugin" => Ok(Self::CboPlugin),
            "bo" | "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown CBO method '{other}'"))),
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Impspec => "impspec",
            Self::Bayesimp => "bayesimp",
            Self::CboPlugin => "cbo",
            Self::Plain => "bo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// Whether `a` is strictly better than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Self::Minimize => a < b,
            Self::Maximize => a > b,
        }
    }
}

/// Stationary additive kernel `v·exp(−(x−x')²/(2ℓ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rbf {
    pub lengthscale: f64,
    pub variance: f64,
}

impl Rbf {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.variance * (-(x - y).powi(2) / (2.0 * self.lengthscale.powi(2))).exp()
    }

    pub fn gram(&self, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), xs.len(), |i, j| self.eval(xs[i], xs[j]))
    }

    /// Default for a domain: a tenth of its width, unit variance.
    pub fn for_domain(lo: f64, hi: f64) -> Self {
        Self {
            lengthscale: 0.1 * (hi - lo),
            variance: 1.0,
        }
    }
}

/// Maps a scalar intervention value to the points whose effect is optimised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Curve {
    /// `x` is written into coordinates `w_dims` of `w` and `z_dims` of `z`.
    Direct {
        w: Vec<f64>,
        z: Vec<f64>,
        w_dims: Vec<usize>,
        z_dims: Vec<usize>,
    },
    /// `x` sets Z coordinate `z_dim`; the other Z coordinates are averaged
    /// over `marginal` (rows in the order of the remaining coordinates).
    Averaged {
        w: Vec<f64>,
        z_dim: usize,
        marginal: Vec<Vec<f64>>,
    },
}

impl Curve {
    /// Evaluation points for `x`: one for direct curves, one per marginal
    /// row for averaged curves.
    pub fn points(&self, x: f64) -> Vec<EvalPoint> {
        match self {
            Curve::Direct {
                w,
                z,
                w_dims,
                z_dims,
            } => {
                let mut w = w.clone();
                let mut z = z.clone();
                w_dims.iter().for_each(|&d| w[d] = x);
                z_dims.iter().for_each(|&d| z[d] = x);
                vec![EvalPoint::new(w, z)]
            }
            Curve::Averaged { w, z_dim, marginal } => marginal
                .iter()
                .map(|m| {
                    let mut z = Vec::with_capacity(m.len() + 1);
                    z.extend_from_slice(&m[..*z_dim]);
                    z.push(x);
                    z.extend_from_slice(&m[*z_dim..]);
                    EvalPoint::new(w.clone(), z)
                })
                .collect(),
        }
    }
}

/// Effect posterior mean and covariance along `xs` under the closed-form
/// posterior.
pub fn impspec_curve(
    post: &Posterior<'_>,
    curve: &Curve,
    xs: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = match curve {
        Curve::Direct { .. } => {
            let pts: Vec<EvalPoint> = xs.iter().flat_map(|&x| curve.points(x)).collect();
            post.joint(&pts)?
        }
        Curve::Averaged { w, z_dim, marginal } => {
            let grid: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            post.ate_curve(w, &[*z_dim], &grid, marginal)?
        }
    };
    Ok((j.mean.clone(), j.cov()))
}

pub fn bayesimp_curve(
    model: &BayesImp<'_>,
    curve: &Curve,
    xs: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = match curve {
        Curve::Direct { .. } => {
            let pts: Vec<EvalPoint> = xs.iter().flat_map(|&x| curve.points(x)).collect();
            model.joint(&pts)?
        }
        Curve::Averaged { w, z_dim, marginal } => {
            let grid: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            model.ate_curve(w, &[*z_dim], &grid, marginal)?
        }
    };
    Ok((j.mean.clone(), j.cov()))
}

/// Plug-in estimates of `E[Y|do(x)]` and `Var(Y|do(x)) = E[Y²|do(x)] − E[Y|do(x)]²`,
/// the latter clamped at zero.
pub fn plugin_curve(
    problem: &Problem,
    params: &ModelParams,
    curve: &Curve,
    xs: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = PlugIn::new(problem, params)?;
    let y2 = problem.y.map(|v| v * v);
    let second = PlugIn::with_outcome(problem, params, &y2)?;
    let mut mean = DVector::zeros(xs.len());
    let mut var = DVector::zeros(xs.len());
    let mut clamped = 0;
    for (i, &x) in xs.iter().enumerate() {
        let pts = curve.points(x);
        let k = pts.len() as f64;
        let m = first.evaluate_all(&pts)?.iter().sum::<f64>() / k;
        let s = second.evaluate_all(&pts)?.iter().sum::<f64>() / k;
        mean[i] = m;
        let v = s - m * m;
        if v < 0.0 {
            clamped += 1;
        }
        var[i] = v.max(0.0);
    }
    if clamped > 0 {
        log::debug!(
            "plug-in variance clamped at 0 on {clamped} of {} grid points",
            xs.len()
        );
    }
    Ok((mean, var))
}

/// GP prior over the grid: `mean`, method covariance `cov`, and `k_RBF`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogatePrior {
    pub kind: PriorKind,
    pub grid: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub rbf: Rbf,
}

impl SurrogatePrior {
    pub fn plain(grid: Vec<f64>, rbf: Rbf) -> Self {
        let g = grid.len();
        Self {
            kind: PriorKind::Plain,
            grid,
            mean: DVector::zeros(g),
            cov: DMatrix::zeros(g, g),
            rbf,
        }
    }

    pub fn from_moments(
        kind: PriorKind,
        grid: Vec<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        rbf: Rbf,
    ) -> Result<Self> {
        let g = grid.len();
        if mean.len() != g || cov.nrows() != g || cov.ncols() != g {
            return Err(Error::DimensionMismatch {
                expected: g,
                got: mean.len(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("surrogate prior"));
        }
        Ok(Self {
            kind,
            grid,
            mean,
            cov: symmetrize(&cov),
            rbf,
        })
    }

    /// Plug-in prior with covariance `σ(x)σ(x')`.
    pub fn from_plugin(
        grid: Vec<f64>,
        mean: DVector<f64>,
        var: DVector<f64>,
        rbf: Rbf,
    ) -> Result<Self> {
        let sd = var.map(|v| v.max(0.0).sqrt());
        let cov = &sd * sd.transpose();
        Self::from_moments(PriorKind::CboPlugin, grid, mean, cov, rbf)
    }

    pub fn full_cov(&self) -> DMatrix<f64> {
        &self.cov + self.rbf.gram(&self.grid)
    }

    /// Posterior mean and variance on the grid after observing `ys` at grid
    /// indices `idx`.
    pub fn condition(&self, idx: &[usize], ys: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = self.full_cov();
        let g = self.grid.len();
        if idx.is_empty() {
            return Ok((self.mean.clone(), k.diagonal()));
        }
        let koo = add_diagonal(
            &DMatrix::from_fn(idx.len(), idx.len(), |a, b| k[(idx[a], idx[b])]),
            OBSERVATION_JITTER,
        );
        let f = Factor::new(&koo, 0.0)?;
        let resid = DVector::from_fn(idx.len(), |a, _| ys[a] - self.mean[idx[a]]);
        let kgo = DMatrix::from_fn(g, idx.len(), |i, a| k[(i, idx[a])]);
        let mean = &self.mean + &kgo * f.solve_vec(&resid);
        let l = f.solve_lower(&kgo.transpose());
        let var = DVector::from_fn(g, |i, _| (k[(i, i)] - l.column(i).norm_squared()).max(0.0));
        Ok((mean, var))
    }

    fn log_evidence(&self, rbf: Rbf, idx: &[usize], ys: &[f64]) -> Result<f64> {
        let n = idx.len();
        let k = DMatrix::from_fn(n, n, |a, b| {
            self.cov[(idx[a], idx[b])] + rbf.eval(self.grid[idx[a]], self.grid[idx[b]])
        });
        let f = Factor::new(&add_diagonal(&k, OBSERVATION_JITTER), 0.0)?;
        let r = DVector::from_fn(n, |a, _| ys[a] - self.mean[idx[a]]);
        let alpha = f.solve_vec(&r);
        Ok(-0.5 * r.dot(&alpha)
            - 0.5 * f.log_det()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Refits `k_RBF` by maximising the evidence of the observations over a
    /// fixed grid of lengthscales and variances.
    pub fn refit_rbf(&mut self, idx: &[usize], ys: &[f64]) {
        if idx.len() < 2 {
            return;
        }
        let lo = self.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo).max(f64::EPSILON);
        let mut best = (f64::NEG_INFINITY, self.rbf);
        for ls in [0.05, 0.1, 0.2, 0.5, 1.0, 2.0] {
            for var in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
                let rbf = Rbf {
                    lengthscale: ls * width,
                    variance: var,
                };
                if let Ok(e) = self.log_evidence(rbf, idx, ys) {
                    if e > best.0 {
                        best = (e, rbf);
                    }
                }
            }
        }
        self.rbf = best.1;
    }
}

/// Closed-form expected improvement over `incumbent`.
pub fn expected_improvement(mean: f64, sd: f64, incumbent: f64, direction: Direction) -> f64 {
    let imp = match direction {
        Direction::Minimize => incumbent - mean,
        Direction::Maximize => mean - incumbent,
    };
    if !(sd > 0.0) {
        return imp.max(0.0);
    }
    let n = Normal::standard();
    let u = imp / sd;
    (imp * n.cdf(u) + sd * n.pdf(u)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Best observed value after each query.
    pub best: Vec<f64>,
    /// `|f* − best_i|` after each query.
    pub regret: Vec<f64>,
    pub optimum: f64,
    pub direction: Direction,
    pub rbf: Rbf,
}

impl BoTrace {
    pub fn new(optimum: f64, direction: Direction, rbf: Rbf) -> Self {
        Self {
            xs: Vec::new(),
            ys: Vec::new(),
            best: Vec::new(),
            regret: Vec::new(),
            optimum,
            direction,
            rbf,
        }
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.regret.iter().sum()
    }

    fn push(&mut self, x: f64, y: f64) {
        let best = match self.best.last() {
            Some(&b) if !self.direction.better(y, b) => b,
            _ => y,
        };
        self.xs.push(x);
        self.ys.push(y);
        self.best.push(best);
        self.regret.push((self.optimum - best).abs());
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "x", "y", "best", "regret"])?;
        for i in 0..self.xs.len() {
            wr.write_record([
                (i + 1).to_string(),
                self.xs[i].to_string(),
                self.ys[i].to_string(),
                self.best[i].to_string(),
                self.regret[i].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// A run that stopped early, with the iterations completed so far.
#[derive(Debug, thiserror::Error)]
#[error("BO run aborted after {} iterations: {source}", partial.xs.len())]
pub struct CboAbort {
    pub partial: BoTrace,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub iters: usize,
    pub refit_every: usize,
    pub direction: Direction,
}

fn nearest_index(grid: &[f64], x: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
        .map_or(0, |(i, _)| i)
}

/// Sequential EI loop. `resume` continues a previous trace by
/// conditioning on its observations first; `iters` counts new queries.
pub fn run_cbo(
    prior: &SurrogatePrior,
    oracle: &mut dyn FnMut(f64) -> Result<f64>,
    optimum: f64,
    cfg: &BoConfig,
    resume: Option<&BoTrace>,
) -> std::result::Result<BoTrace, CboAbort> {
    let mut prior = prior.clone();
    let mut trace = match resume {
        Some(t) => {
            prior.rbf = t.rbf;
            t.clone()
        }
        None => BoTrace::new(optimum, cfg.direction, prior.rbf),
    };
    let abort = |trace: &BoTrace, source: Error| CboAbort {
        partial: trace.clone(),
        source,
    };
    if cfg.iters == 0 {
        return Err(abort(
            &trace,
            Error::InvalidParameter("iters must be at least 1".into()),
        ));
    }
    if prior.grid.is_empty() {
        return Err(abort(
            &trace,
            Error::InvalidParameter("empty intervention grid".into()),
        ));
    }
    let mut idx: Vec<usize> = trace
        .xs
        .iter()
        .map(|&x| nearest_index(&prior.grid, x))
        .collect();
    let start = trace.xs.len();
    for it in 0..cfg.iters {
        let (mean, var) = prior
            .condition(&idx, &trace.ys)
            .map_err(|e| abort(&trace, e))?;
        let incumbent = match trace.best.last() {
            Some(&b) => b,
            None => {
                let pick = |a: &f64, b: &f64| a.total_cmp(b);
                match cfg.direction {
                    Direction::Minimize => mean.iter().copied().min_by(pick),
                    Direction::Maximize => mean.iter().copied().max_by(pick),
                }
                .unwrap_or(0.0)
            }
        };
        let mut next = 0;
        let mut best_ei = f64::NEG_INFINITY;
        for i in 0..prior.grid.len() {
            let ei = expected_improvement(mean[i], var[i].sqrt(), incumbent, cfg.direction);
            if ei > best_ei {
                best_ei = ei;
                next = i;
            }
        }
        let x = prior.grid[next];
        let y = match oracle(x) {
            Ok(y) if y.is_finite() => y,
            Ok(_) => return Err(abort(&trace, Error::NonFinite("oracle value"))),
            Err(e) => return Err(abort(&trace, e)),
        };
        trace.push(x, y);
        idx.push(next);
        let done = start + it + 1;
        if cfg.refit_every > 0 && done % cfg.refit_every == 0 {
            prior.refit_rbf(&idx, &trace.ys);
            trace.rbf = prior.rbf;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ei_at_zero_score() {
        assert_eq!(
            expected_improvement(1.0, 0.0, 1.0, Direction::Minimize),
            0.0
        );
        let v = expected_improvement(1.0, 1.0, 1.0, Direction::Minimize);
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert_eq!(
            expected_improvement(0.5, 0.0, 1.0, Direction::Minimize),
            0.5
        );
        assert_eq!(
            expected_improvement(0.5, 0.0, 1.0, Direction::Maximize),
            0.0
        );
    }

    #[test]
    fn no_observations_returns_prior() {
        let grid: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let p = SurrogatePrior::plain(grid, Rbf::for_domain(0.0, 4.0));
        let (m, v) = p.condition(&[], &[]).unwrap();
        assert_eq!(m, DVector::zeros(5));
        assert_eq!(v, p.full_cov().diagonal());
    }

    #[test]
    fn averaged_curve_inserts_coordinate() {
        let c = Curve::Averaged {
            w: vec![],
            z_dim: 1,
            marginal: vec![vec![1.0, 2.0]],
        };
        assert_eq!(c.points(9.0)[0].z, vec![1.0, 9.0, 2.0]);
    }
}
