//! Two-stage kernel-ridge estimator `γ̂(w,z) = β(z)ᵀ K₂₁ (k_W(w) ⊙ c)`.
//!
//! Computed with LU solves and explicit sums so that it shares no code path
//! with the posterior mean.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::data::Problem;
use crate::error::{Error, Result};
use crate::gp::ModelParams;
use crate::posterior::EvalPoint;

/// Factored plug-in estimator for one problem and outcome vector.
pub struct PlugIn<'a> {
    problem: &'a Problem,
    params: &'a ModelParams,
    lu2: LU<f64, Dyn, Dyn>,
    c: DVector<f64>,
    /// `k_V(V₂_i, V₁_j)`.
    k21: DMatrix<f64>,
    z2_rows: Vec<Vec<f64>>,
    w_rows: Vec<Vec<f64>>,
}

impl<'a> PlugIn<'a> {
    pub fn new(problem: &'a Problem, params: &'a ModelParams) -> Result<Self> {
        Self::with_outcome(problem, params, &problem.y)
    }

    /// Same regressions with `y` replaced, e.g. by `y²` for second moments.
    pub fn with_outcome(
        problem: &'a Problem,
        params: &'a ModelParams,
        y: &DVector<f64>,
    ) -> Result<Self> {
        params.validate()?;
        params.check_dims(problem)?;
        if y.len() != problem.n1() {
            return Err(Error::DimensionMismatch {
                expected: problem.n1(),
                got: y.len(),
            });
        }
        let n1 = problem.n1();
        let v1_rows = rows(&problem.v1);
        let w_rows = problem.w1.as_ref().map(rows).unwrap_or_default();
        let mut k1 = DMatrix::zeros(n1, n1);
        for i in 0..n1 {
            for j in 0..n1 {
                let mut v = params.kv.eval(&v1_rows[i], &v1_rows[j]);
                if let Some(kw) = &params.kw {
                    v *= kw.eval(&w_rows[i], &w_rows[j]);
                }
                k1[(i, j)] = v;
            }
            k1[(i, i)] += params.sigma2;
        }
        let n2 = problem.n2();
        let z2_rows = rows(&problem.z2);
        let v2_rows = rows(&problem.v2);
        let mut k2 = DMatrix::zeros(n2, n2);
        for i in 0..n2 {
            for j in 0..n2 {
                k2[(i, j)] = params.kz.eval(&z2_rows[i], &z2_rows[j]);
            }
            k2[(i, i)] += params.eta2;
        }
        let c = k1
            .lu()
            .solve(y)
            .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        Ok(Self {
            problem,
            params,
            lu2: k2.lu(),
            c,
            k21: DMatrix::from_fn(n2, n1, |i, j| params.kv.eval(&v2_rows[i], &v1_rows[j])),
            z2_rows,
            w_rows,
        })
    }

    pub fn evaluate(&self, point: &EvalPoint) -> Result<f64> {
        let p = self.problem;
        if point.w.len() != p.w_dim() || point.z.len() != p.z_dim() {
            return Err(Error::DimensionMismatch {
                expected: p.w_dim() + p.z_dim(),
                got: point.w.len() + point.z.len(),
            });
        }
        let kz = DVector::from_fn(p.n2(), |i, _| {
            self.params.kz.eval(&self.z2_rows[i], &point.z)
        });
        let beta = self
            .lu2
            .solve(&kz)
            .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        let mut total = 0.0;
        for j in 0..p.n1() {
            let hj = match &self.params.kw {
                Some(kw) => kw.eval(&self.w_rows[j], &point.w),
                None => 1.0,
            };
            let mut inner = 0.0;
            for i in 0..p.n2() {
                inner += beta[i] * self.k21[(i, j)];
            }
            total += inner * hj * self.c[j];
        }
        Ok(total)
    }

    pub fn evaluate_all(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        points.iter().map(|p| self.evaluate(p)).collect()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `γ̂(w,z)` at one point.
pub fn plugin_estimator(problem: &Problem, params: &ModelParams, point: &EvalPoint) -> Result<f64> {
    PlugIn::new(problem, params)?.evaluate(point)
}
