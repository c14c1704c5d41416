//! Truncated posterior sampler used as an independent check on the
//! closed-form moments.
//!
//! Features are stored pre-scaled, `φ̃_j = λ_j^{1/2} φ_j`, so that
//! `Σ_j φ̃_j(v) φ̃_j(v') ≈ k(v,v')`. The effect is `γ_m = fᵀL` with
//! independent Gaussian `f` and `L`:
//!
//! ```text
//! m_f = Φ̃₁ᵀ (h ⊙ c)              C_f = k(w,w)·I − (D Φ̃₁)ᵀ K₁⁻¹ (D Φ̃₁)
//! m_L = Φ̃₂ᵀ β(z)                 C_L = diag(λ)·k̂(z,z)
//! ```

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::FittedModel;
use crate::kernels::{gram_unchecked, kernel_vector, KernelParams, SpectralMeasure};
use crate::linalg::psd_sqrt;
use crate::posterior::EvalPoint;
use crate::seeds;

/// Modes with eigenvalue below this fraction of the largest are treated as
/// numerically null and dropped.
pub const NULL_MODE_RATIO: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Nystrom,
    Rff,
}

#[derive(Debug, Clone)]
enum Evaluator {
    Nystrom {
        landmarks: DMatrix<f64>,
        /// `u_i / sqrt(T λ_i)` as columns.
        projection: DMatrix<f64>,
    },
    Rff {
        /// One frequency per row.
        frequencies: DMatrix<f64>,
        scale: f64,
    },
}

/// A finite feature expansion of `k_V`.
#[derive(Debug, Clone)]
pub struct TruncatedFeatures {
    pub kind: FeatureKind,
    /// Retained eigenvalues, non-increasing (uniform for RFF).
    pub eigenvalues: Vec<f64>,
    /// Sum of all eigenvalues before truncation.
    pub eigenvalue_sum: f64,
    pub seed: u64,
    params: KernelParams,
    eval: Evaluator,
}

impl TruncatedFeatures {
    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Scaled features at the rows of `v`, one feature per column.
    pub fn evaluate(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.ncols() != self.params.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.params.dim(),
                got: v.ncols(),
            });
        }
        Ok(match &self.eval {
            Evaluator::Nystrom {
                landmarks,
                projection,
            } => gram_unchecked(v, landmarks, &self.params) * projection,
            Evaluator::Rff { frequencies, scale } => {
                let proj = v * frequencies.transpose();
                let half = frequencies.nrows();
                DMatrix::from_fn(v.nrows(), 2 * half, |i, j| {
                    if j < half {
                        scale * proj[(i, j)].cos()
                    } else {
                        scale * proj[(i, j - half)].sin()
                    }
                })
            }
        })
    }

    /// `Σ_j φ̃_j(x) φ̃_j(y)`.
    pub fn reconstruct(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(x)? * self.evaluate(y)?.transpose())
    }
}

/// Nyström eigenfeatures from `t` draws of the measure, keeping at most
/// `m` leading modes.
pub fn nystrom_eigen(
    params: &KernelParams,
    measure: &SpectralMeasure,
    t: usize,
    m: usize,
    seed: u64,
) -> Result<TruncatedFeatures> {
    params.validate()?;
    measure.validate()?;
    if measure.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: measure.dim(),
        });
    }
    if m == 0 || m > t {
        return Err(Error::InvalidParameter(format!(
            "need 1 ≤ m ≤ T, got m={m}, T={t}"
        )));
    }
    let mut rng = seeds::rng(seed);
    let landmarks = measure.sample(t, &mut rng);
    let tf = t as f64;
    let g = faer::Mat::<f64>::from_fn(t, t, |i, j| {
        params.eval(
            landmarks.row(i).transpose().as_slice(),
            landmarks.row(j).transpose().as_slice(),
        ) / tf
    });
    let eig = g
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| Error::NotPositiveDefinite { jitter: 0.0 })?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let eigenvalue_sum: f64 = (0..t).map(|i| s[i]).sum();
    let lmax = s[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .take(m)
        .take_while(|&i| s[i] > NULL_MODE_RATIO * lmax)
        .collect();
    let eigenvalues: Vec<f64> = keep.iter().map(|&i| s[i]).collect();
    let projection = DMatrix::from_fn(t, keep.len(), |r, c| {
        let i = keep[c];
        u[(r, i)] / (tf * s[i]).sqrt()
    });
    Ok(TruncatedFeatures {
        kind: FeatureKind::Nystrom,
        eigenvalues,
        eigenvalue_sum,
        seed,
        params: params.clone(),
        eval: Evaluator::Nystrom {
            landmarks,
            projection,
        },
    })
}

/// Paired cosine/sine random Fourier features; `m` must be even.
pub fn rff_features(params: &KernelParams, m: usize, seed: u64) -> Result<TruncatedFeatures> {
    params.validate()?;
    if m < 2 || m % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "RFF feature count must be even and positive, got {m}"
        )));
    }
    let half = m / 2;
    let mut rng = seeds::rng(seed);
    let d = params.dim();
    let frequencies = DMatrix::from_fn(half, d, |_, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z / params.lengthscales[j]
    });
    let a = params.amplitude;
    Ok(TruncatedFeatures {
        kind: FeatureKind::Rff,
        eigenvalues: vec![a / m as f64; m],
        eigenvalue_sum: a,
        seed,
        params: params.clone(),
        eval: Evaluator::Rff {
            frequencies,
            scale: (2.0 * a / m as f64).sqrt(),
        },
    })
}

/// Means and covariances of the two independent factors of `γ_m`.
#[derive(Debug, Clone)]
pub struct TruncatedPosterior {
    pub m_f: DVector<f64>,
    pub c_f: DMatrix<f64>,
    pub m_l: DVector<f64>,
    /// Diagonal of `C_L`.
    pub c_l: DVector<f64>,
}

impl TruncatedPosterior {
    pub fn new(
        model: &FittedModel,
        features: &TruncatedFeatures,
        point: &EvalPoint,
    ) -> Result<Self> {
        let prob = &model.problem;
        let params = &model.params;
        if features.params() != &params.kv {
            return Err(Error::InvalidParameter(
                "features were built for a different k_V".into(),
            ));
        }
        if point.w.len() != prob.w_dim() || point.z.len() != prob.z_dim() {
            return Err(Error::DimensionMismatch {
                expected: prob.w_dim() + prob.z_dim(),
                got: point.w.len() + point.z.len(),
            });
        }
        let (h, kww) = match (&params.kw, &prob.w1) {
            (Some(kw), Some(w1)) => (kernel_vector(w1, &point.w, kw), kw.amplitude),
            _ => (DVector::from_element(prob.n1(), 1.0), 1.0),
        };
        let c = model.stage1.solve_vec(&prob.y);
        let f1 = features.evaluate(&prob.v1)?;
        let f2 = if prob.fusion {
            features.evaluate(&prob.v2)?
        } else {
            f1.clone()
        };
        let m_f = f1.transpose() * h.component_mul(&c);
        let mut df1 = f1.clone();
        for (mut row, hi) in df1.row_iter_mut().zip(h.iter()) {
            row *= *hi;
        }
        let l = model.stage1.solve_lower(&df1);
        let mut c_f = -(l.transpose() * &l);
        for i in 0..c_f.nrows() {
            c_f[(i, i)] += kww;
        }
        let kz = kernel_vector(&prob.z2, &point.z, &params.kz);
        let beta = model.stage2.solve_vec(&kz);
        let khat = (params.kz.amplitude - kz.dot(&beta)).max(0.0);
        let m_l = f2.transpose() * beta;
        let c_l = DVector::from_iterator(
            features.count(),
            features.eigenvalues.iter().map(|l| l * khat),
        );
        Ok(Self { m_f, c_f, m_l, c_l })
    }

    /// Exact mean and variance of `fᵀL` under the two Gaussians.
    pub fn analytic_moments(&self) -> (f64, f64) {
        let c_f = crate::linalg::symmetrize(&self.c_f);
        let cl = &self.c_l;
        let mean = self.m_f.dot(&self.m_l);
        let t1: f64 = self.m_f.iter().zip(cl.iter()).map(|(m, c)| m * m * c).sum();
        let t2 = self.m_l.dot(&(&c_f * &self.m_l));
        let t3: f64 = (0..cl.len()).map(|i| c_f[(i, i)] * cl[i]).sum();
        (mean, t1 + t2 + t3)
    }

    /// Draws `n` samples of `fᵀL`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        const CHUNK: usize = 8192;
        let m = self.m_f.len();
        let sf = psd_sqrt(&self.c_f);
        let sl = self.c_l.map(|c| c.max(0.0).sqrt());
        let chunks: Vec<(usize, usize)> = (0..n.div_ceil(CHUNK))
            .map(|k| (k, CHUNK.min(n - k * CHUNK)))
            .collect();
        chunks
            .par_iter()
            .flat_map_iter(|&(k, len)| {
                let mut rng = seeds::sub_rng(seed, k as u64);
                let e1: DMatrix<f64> =
                    DMatrix::from_fn(m, len, |_, _| StandardNormal.sample(&mut rng));
                let e2: DMatrix<f64> =
                    DMatrix::from_fn(m, len, |_, _| StandardNormal.sample(&mut rng));
                let f = &sf * e1;
                (0..len)
                    .map(|s| {
                        (0..m)
                            .map(|j| (self.m_f[j] + f[(j, s)]) * (self.m_l[j] + sl[j] * e2[(j, s)]))
                            .sum::<f64>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Samples of the truncated effect at one point.
pub fn sample_truncated_gamma(
    model: &FittedModel,
    features: &TruncatedFeatures,
    point: &EvalPoint,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be positive".into()));
    }
    Ok(TruncatedPosterior::new(model, features, point)?.sample(n_samples, seed))
}

/// Sample mean, sample variance and standard error of the mean.
pub fn sample_stats(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var, (var / n).sqrt())
}
