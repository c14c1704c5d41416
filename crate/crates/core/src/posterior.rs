//! Closed-form posterior moments of the causal effect
//! `γ(w,z) = ∫ E[Y|W=w,V=v] P(dv|Z=z)`, their cross-covariances, averages
//! over empirical marginals, and Gaussian credible intervals.
//!
//! For evaluation points `p, q` with `h_p = k_W(W₁, w_p)` (all ones when
//! W = ∅), `β_p = (K_ZZ+η²I)⁻¹ k_Z(Z₂, z_p)` and `c = (K_WW⊙K_VV+σ²I)⁻¹Y`:
//!
//! ```text
//! mean_p = β_pᵀ K₂₁ (c ⊙ h_p)
//! C1 = k_W(w_p,w_q) β_pᵀK₂₂β_q − (K₁₂β_p ⊙ h_p)ᵀ K₁⁻¹ (K₁₂β_q ⊙ h_q)
//! C2 = k̂(z_p,z_q) [ (c⊙h_p)ᵀ K̃ (c⊙h_q) − h_pᵀ (K̃ ⊙ K₁⁻¹) h_q ]
//! C3 = τ k_W(w_p,w_q) k̂(z_p,z_q)
//! ```
//!
//! Without fusion `K₂₁ = K₂₂ = K_VV`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Roles;
use crate::error::{Error, Result};
use crate::gp::FittedModel;
use crate::kernels::{
    gram_unchecked, smoothed_gram, tau, KernelParams, Smoothing, SpectralMeasure,
};

/// Absolute slack below zero tolerated (and clamped) for variances.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    CateBackdoor,
    AttFrontdoor,
    Ate,
    Custom,
}

/// Which columns play which role, and which formula family applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalQuery {
    pub estimand: Estimand,
    pub roles: Roles,
    pub fusion: bool,
}

impl CausalQuery {
    pub fn w_empty(&self) -> bool {
        self.roles.w_empty()
    }

    /// Checks that the query describes the layout the model was fitted on.
    pub fn check(&self, model: &FittedModel) -> Result<()> {
        let p = &model.problem;
        if self.fusion != p.fusion {
            return Err(Error::Config(format!(
                "query fusion flag {} does not match the fitted data",
                self.fusion
            )));
        }
        let dims = [
            (self.roles.w.len(), p.w_dim()),
            (self.roles.v.len(), p.v_dim()),
            (self.roles.z.len(), p.z_dim()),
        ];
        for (q, m) in dims {
            if q != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: q,
                });
            }
        }
        Ok(())
    }
}

/// Evaluation point `(w, z)`; `w` is empty when W = ∅.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub w: Vec<f64>,
    pub z: Vec<f64>,
}

impl EvalPoint {
    pub fn new(w: Vec<f64>, z: Vec<f64>) -> Self {
        Self { w, z }
    }

    pub fn z_only(z: Vec<f64>) -> Self {
        Self { w: Vec::new(), z }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: f64,
    pub variance: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub at: EvalPoint,
}

/// Means and covariance components over a finite set of points.
#[derive(Debug, Clone)]
pub struct JointMoments {
    pub mean: DVector<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub s3: DMatrix<f64>,
}

impl JointMoments {
    pub fn cov(&self) -> DMatrix<f64> {
        &self.s1 + &self.s2 + &self.s3
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Clamped variance at index `i`.
    pub fn variance(&self, i: usize) -> Result<f64> {
        let (s1, s2, s3) = (self.s1[(i, i)], self.s2[(i, i)], self.s3[(i, i)]);
        clamp_variance_scaled(s1 + s2 + s3, s1.abs() + s2.abs() + s3.abs())
    }

    /// Pointwise moments at index `i`, with the variance clamp applied.
    pub fn moments(&self, i: usize, at: EvalPoint) -> Result<PosteriorMoments> {
        let (s1, s2, s3) = (self.s1[(i, i)], self.s2[(i, i)], self.s3[(i, i)]);
        Ok(PosteriorMoments {
            mean: self.mean[i],
            variance: self.variance(i)?,
            s1,
            s2,
            s3,
            at,
        })
    }

    /// Average over all points: mean of means and of every covariance entry.
    pub fn average(&self, at: EvalPoint) -> Result<PosteriorMoments> {
        if self.is_empty() {
            return Err(Error::InvalidParameter("empty marginal set".into()));
        }
        let p2 = (self.len() * self.len()) as f64;
        let (s1, s2, s3) = (self.s1.sum() / p2, self.s2.sum() / p2, self.s3.sum() / p2);
        Ok(PosteriorMoments {
            mean: self.mean.mean(),
            variance: clamp_variance_scaled(s1 + s2 + s3, s1.abs() + s2.abs() + s3.abs())?,
            s1,
            s2,
            s3,
            at,
        })
    }
}

pub(crate) fn clamp_variance(v: f64) -> Result<f64> {
    clamp_variance_scaled(v, 1.0)
}

/// Clamps with tolerance `NEGATIVE_VARIANCE_TOL · max(1, scale)`, where
/// `scale` bounds the magnitude of the terms that were summed.
pub(crate) fn clamp_variance_scaled(v: f64, scale: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite("posterior variance"));
    }
    if v < -NEGATIVE_VARIANCE_TOL * scale.max(1.0) {
        return Err(Error::NegativeVariance(v));
    }
    Ok(v.max(0.0))
}

/// Precomputed posterior for a fitted model and a spectral measure.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    model: &'a FittedModel,
    c: DVector<f64>,
    kinv1: DMatrix<f64>,
    k22: DMatrix<f64>,
    k21: DMatrix<f64>,
    ktilde: DMatrix<f64>,
    /// `K̃ ⊙ K₁⁻¹`.
    kt_kinv: DMatrix<f64>,
    tau: f64,
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a FittedModel, measure: &SpectralMeasure) -> Result<Self> {
        Self::with_smoothing(model, measure, Smoothing::ClosedForm)
    }

    pub fn with_smoothing(
        model: &'a FittedModel,
        measure: &SpectralMeasure,
        smoothing: Smoothing,
    ) -> Result<Self> {
        let ktilde = smoothed_gram(&model.problem.v1, &model.params.kv, measure, smoothing)?;
        Self::with_ktilde(model, ktilde)
    }

    /// Uses a caller-supplied `K̃` over the stage-1 V rows.
    pub fn with_ktilde(model: &'a FittedModel, ktilde: DMatrix<f64>) -> Result<Self> {
        let p = &model.problem;
        let kv = &model.params.kv;
        if ktilde.nrows() != p.n1() || ktilde.ncols() != p.n1() {
            return Err(Error::DimensionMismatch {
                expected: p.n1(),
                got: ktilde.nrows(),
            });
        }
        let c = model.stage1.solve_vec(&p.y);
        let kinv1 = model.stage1.inverse();
        let (k22, k21) = if p.fusion {
            (
                gram_unchecked(&p.v2, &p.v2, kv),
                gram_unchecked(&p.v2, &p.v1, kv),
            )
        } else {
            let k = gram_unchecked(&p.v1, &p.v1, kv);
            (k.clone(), k)
        };
        let kt_kinv = ktilde.component_mul(&kinv1);
        Ok(Self {
            model,
            c,
            kinv1,
            k22,
            k21,
            ktilde,
            kt_kinv,
            tau: tau(kv),
        })
    }

    pub fn model(&self) -> &FittedModel {
        self.model
    }

    pub fn ktilde(&self) -> &DMatrix<f64> {
        &self.ktilde
    }

    /// Replaces the spectral measure, keeping everything else.
    pub fn set_measure(&mut self, measure: &SpectralMeasure, smoothing: Smoothing) -> Result<()> {
        self.ktilde = smoothed_gram(
            &self.model.problem.v1,
            &self.model.params.kv,
            measure,
            smoothing,
        )?;
        self.kt_kinv = self.ktilde.component_mul(&self.kinv1);
        Ok(())
    }

    fn check_point(&self, p: &EvalPoint) -> Result<()> {
        let prob = &self.model.problem;
        if p.w.len() != prob.w_dim() {
            return Err(Error::DimensionMismatch {
                expected: prob.w_dim(),
                got: p.w.len(),
            });
        }
        if p.z.len() != prob.z_dim() {
            return Err(Error::DimensionMismatch {
                expected: prob.z_dim(),
                got: p.z.len(),
            });
        }
        if p.w.iter().chain(&p.z).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation point"));
        }
        Ok(())
    }

    /// `H = k_W(W₁, w_P)` (ones when W = ∅) and `K_W(w_P, w_P)`.
    fn w_side(&self, ws: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let prob = &self.model.problem;
        let n = ws.nrows();
        match (&self.model.params.kw, &prob.w1) {
            (Some(kw), Some(w1)) => (gram_unchecked(w1, ws, kw), gram_unchecked(ws, ws, kw)),
            _ => (
                DMatrix::from_element(prob.n1(), n, 1.0),
                DMatrix::from_element(n, n, 1.0),
            ),
        }
    }

    /// Core assembly from the W-side (`H`, `K_W`) and Z-side (`KZ`,
    /// `K_Z(z_P,z_P)`) blocks.
    fn assemble(
        &self,
        h: &DMatrix<f64>,
        kw: &DMatrix<f64>,
        kz_cross: &DMatrix<f64>,
        kz_pp: &DMatrix<f64>,
    ) -> JointMoments {
        let b = self.model.stage2.solve(kz_cross);
        let khat = kz_pp - kz_cross.transpose() * &b;
        let khat = crate::linalg::symmetrize(&khat);
        let u = self.k21.transpose() * &b;
        let g = u.component_mul(h);
        let lg = self.model.stage1.solve_lower(&g);
        let s1 = kw.component_mul(&(b.transpose() * &self.k22 * &b)) - lg.transpose() * &lg;
        let a = h
            .column_iter()
            .map(|col| col.component_mul(&self.c))
            .collect::<Vec<_>>();
        let a = DMatrix::from_columns(&a);
        let quad = a.transpose() * &self.ktilde * &a - h.transpose() * &self.kt_kinv * h;
        let s2 = khat.component_mul(&quad);
        let s3 = kw.component_mul(&khat) * self.tau;
        let ka = &self.k21 * &a;
        let mean = DVector::from_fn(b.ncols(), |p, _| b.column(p).dot(&ka.column(p)));
        JointMoments {
            mean,
            s1: crate::linalg::symmetrize(&s1),
            s2: crate::linalg::symmetrize(&s2),
            s3: crate::linalg::symmetrize(&s3),
        }
    }

    /// Joint moments over arbitrary points.
    pub fn joint(&self, points: &[EvalPoint]) -> Result<JointMoments> {
        for p in points {
            self.check_point(p)?;
        }
        let prob = &self.model.problem;
        let kz = &self.model.params.kz;
        let ws = DMatrix::from_fn(points.len(), prob.w_dim(), |i, j| points[i].w[j]);
        let zs = DMatrix::from_fn(points.len(), prob.z_dim(), |i, j| points[i].z[j]);
        let (h, kw) = self.w_side(&ws);
        let kz_cross = gram_unchecked(&prob.z2, &zs, kz);
        let kz_pp = gram_unchecked(&zs, &zs, kz);
        Ok(self.assemble(&h, &kw, &kz_cross, &kz_pp))
    }

    pub fn moments(&self, point: &EvalPoint) -> Result<PosteriorMoments> {
        self.joint(std::slice::from_ref(point))?
            .moments(0, point.clone())
    }

    pub fn mean(&self, point: &EvalPoint) -> Result<f64> {
        Ok(self.joint(std::slice::from_ref(point))?.mean[0])
    }

    pub fn cross_cov(&self, p: &EvalPoint, q: &EvalPoint) -> Result<f64> {
        let j = self.joint(&[p.clone(), q.clone()])?;
        Ok(j.cov()[(0, 1)])
    }

    /// Posterior of the average of γ over `points` (an empirical marginal).
    pub fn ate(&self, points: &[EvalPoint]) -> Result<PosteriorMoments> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("empty marginal set".into()));
        }
        let at = points[0].clone();
        self.joint(points)?.average(at)
    }

    /// Average effects along a curve, without forming the full
    /// (grid × marginal)² covariance.
    ///
    /// Each curve point fixes `w` and the Z coordinates `intervention_dims`
    /// to a `grid` row; the remaining Z coordinates are averaged over the
    /// rows of `marginal`. Relies on the product structure of `k_Z`.
    pub fn ate_curve(
        &self,
        w: &[f64],
        intervention_dims: &[usize],
        grid: &[Vec<f64>],
        marginal: &[Vec<f64>],
    ) -> Result<JointMoments> {
        let prob = &self.model.problem;
        let dz = prob.z_dim();
        self.check_point(&EvalPoint::new(w.to_vec(), vec![0.0; dz]))?;

        let (kz_cross, kz_pp) = curve_z_blocks(
            &prob.z2,
            &self.model.params.kz,
            intervention_dims,
            grid,
            marginal,
        )?;
        let ws = DMatrix::from_fn(grid.len(), w.len(), |_, j| w[j]);
        let (h, kw) = self.w_side(&ws);
        Ok(self.assemble(&h, &kw, &kz_cross, &kz_pp))
    }
}

/// Z-side blocks for curves averaged over an empirical marginal of the
/// non-intervened Z coordinates: the averaged cross-gram `mean_i k_Z(Z₂, z_{g,i})`
/// (n₂ × G) and `mean_{i,j} k_Z(z_{g,i}, z_{g',j})` (G × G).
pub(crate) fn curve_z_blocks(
    z2: &DMatrix<f64>,
    kz: &KernelParams,
    intervention_dims: &[usize],
    grid: &[Vec<f64>],
    marginal: &[Vec<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dz = z2.ncols();
    if marginal.is_empty() {
        return Err(Error::InvalidParameter("empty marginal set".into()));
    }
    if intervention_dims.iter().any(|&d| d >= dz) {
        return Err(Error::DimensionMismatch {
            expected: dz,
            got: intervention_dims.iter().copied().max().unwrap_or(0) + 1,
        });
    }
    let other: Vec<usize> = (0..dz).filter(|d| !intervention_dims.contains(d)).collect();
    if let Some(g) = grid.iter().find(|g| g.len() != intervention_dims.len()) {
        return Err(Error::DimensionMismatch {
            expected: intervention_dims.len(),
            got: g.len(),
        });
    }
    if let Some(m) = marginal.iter().find(|m| m.len() != other.len()) {
        return Err(Error::DimensionMismatch {
            expected: other.len(),
            got: m.len(),
        });
    }
    let sub = |dims: &[usize]| KernelParams {
        lengthscales: dims.iter().map(|&d| kz.lengthscales[d]).collect(),
        amplitude: 1.0,
    };
    let (kx, km) = (sub(intervention_dims), sub(&other));
    let cols = |m: &DMatrix<f64>, dims: &[usize]| {
        DMatrix::from_fn(m.nrows(), dims.len(), |i, j| m[(i, dims[j])])
    };
    let rows = |v: &[Vec<f64>], d: usize| DMatrix::from_fn(v.len(), d, |i, j| v[i][j]);
    let xg = rows(grid, intervention_dims.len());
    let mm = rows(marginal, other.len());
    let z2x = cols(z2, intervention_dims);
    let z2m = cols(z2, &other);

    let e = gram_unchecked(&z2m, &mm, &km).column_mean();
    let mean_km = gram_unchecked(&mm, &mm, &km).mean();
    let mut kz_cross = gram_unchecked(&z2x, &xg, &kx) * kz.amplitude;
    for mut col in kz_cross.column_iter_mut() {
        col.component_mul_assign(&e);
    }
    let kz_pp = gram_unchecked(&xg, &xg, &kx) * (kz.amplitude * mean_km);
    Ok((kz_cross, kz_pp))
}

/// Pointwise posterior moments (closed-form `K̃`).
pub fn posterior_moments(
    model: &FittedModel,
    query: &CausalQuery,
    measure: &SpectralMeasure,
    point: &EvalPoint,
) -> Result<PosteriorMoments> {
    query.check(model)?;
    Posterior::new(model, measure)?.moments(point)
}

/// `Cov(γ(p), γ(q))`.
pub fn posterior_cross_cov(
    model: &FittedModel,
    query: &CausalQuery,
    measure: &SpectralMeasure,
    p: &EvalPoint,
    q: &EvalPoint,
) -> Result<f64> {
    query.check(model)?;
    Posterior::new(model, measure)?.cross_cov(p, q)
}

/// Variance of the incremental effect `γ(p) − γ(q)`.
pub fn incremental_variance(post: &Posterior<'_>, p: &EvalPoint, q: &EvalPoint) -> Result<f64> {
    let c = post.joint(&[p.clone(), q.clone()])?.cov();
    clamp_variance(c[(0, 0)] + c[(1, 1)] - 2.0 * c[(0, 1)])
}

/// Posterior of the empirical average of γ over `marginal_points`.
pub fn ate_moments(
    model: &FittedModel,
    query: &CausalQuery,
    measure: &SpectralMeasure,
    marginal_points: &[EvalPoint],
) -> Result<PosteriorMoments> {
    query.check(model)?;
    Posterior::new(model, measure)?.ate(marginal_points)
}

/// Central Gaussian interval `mean ± z_{(1+α)/2}·sd`.
pub fn credible_interval(moments: &PosteriorMoments, alpha: f64) -> Result<(f64, f64)> {
    interval(moments.mean, moments.variance, alpha)
}

pub fn interval(mean: f64, variance: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let sd = clamp_variance(variance)?.sqrt();
    let half = normal_quantile(0.5 * (1.0 + alpha)) * sd;
    Ok((mean - half, mean + half))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(mean: f64, variance: f64) -> PosteriorMoments {
        PosteriorMoments {
            mean,
            variance,
            s1: variance,
            s2: 0.0,
            s3: 0.0,
            at: EvalPoint::z_only(vec![0.0]),
        }
    }

    #[test]
    fn standard_interval() {
        let (lo, hi) = credible_interval(&pm(0.0, 1.0), 0.95).unwrap();
        assert!((hi - 1.959964).abs() < 1e-6 && (lo + 1.959964).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_is_degenerate_and_bad_alpha_rejected() {
        assert_eq!(credible_interval(&pm(2.0, 0.0), 0.5).unwrap(), (2.0, 2.0));
        assert!(credible_interval(&pm(0.0, 1.0), 1.0).is_err());
        assert!(credible_interval(&pm(0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn tiny_negative_variance_clamped_large_rejected() {
        assert_eq!(clamp_variance(-1e-9).unwrap(), 0.0);
        assert!(matches!(
            clamp_variance(-1e-6),
            Err(Error::NegativeVariance(_))
        ));
    }
}
