//! Anisotropic Gaussian kernels, gram matrices and the measure-smoothed
//! gram `∫ k(x,t) k(t,x') dμ(t)`.
//!
//! Point sets are `DMatrix<f64>` with one point per row.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Parameters of `k(x,x') = a·exp(−Σ_d (x_d−x'_d)² / (2ℓ_d²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub amplitude: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, amplitude: f64) -> Result<Self> {
        let p = Self {
            lengthscales,
            amplitude,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-amplitude kernel with the same lengthscale in every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale; dim],
            amplitude: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "kernel lengthscales must be positive, got {l}"
            )));
        }
        Ok(())
    }

    fn inv_sq(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }

    /// Kernel value for two points given as slices.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((a, b), l) in x.iter().zip(y).zip(&self.lengthscales) {
            let d = (a - b) / l;
            s += d * d;
        }
        self.amplitude * (-0.5 * s).exp()
    }
}

/// `k(0,0)`, which equals the eigenvalue sum of any translation-invariant
/// kernel.
pub fn tau(params: &KernelParams) -> f64 {
    params.amplitude
}

fn check_points(x: &DMatrix<f64>, dim: usize, what: &'static str) -> Result<()> {
    if x.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Cross gram `K[i,j] = k(X_i, X2_j)`.
pub fn gram(x: &DMatrix<f64>, x2: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_points(x, params.dim(), "gram input")?;
    check_points(x2, params.dim(), "gram input")?;
    Ok(gram_unchecked(x, x2, params))
}

pub(crate) fn gram_unchecked(
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    params: &KernelParams,
) -> DMatrix<f64> {
    let inv = params.inv_sq();
    let (n, m, d) = (x.nrows(), x2.nrows(), x.ncols());
    DMatrix::from_fn(n, m, |i, j| {
        let mut s = 0.0;
        for k in 0..d {
            let diff = x[(i, k)] - x2[(j, k)];
            s += diff * diff * inv[k];
        }
        params.amplitude * (-0.5 * s).exp()
    })
}

/// Symmetric gram of a single point set; exploits symmetry.
pub fn gram_sym(x: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_points(x, params.dim(), "gram input")?;
    Ok(gram_sym_unchecked(x, params))
}

pub(crate) fn gram_sym_unchecked(x: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let inv = params.inv_sq();
    let (n, d) = (x.nrows(), x.ncols());
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.amplitude;
        for j in 0..i {
            let mut s = 0.0;
            for c in 0..d {
                let diff = x[(i, c)] - x[(j, c)];
                s += diff * diff * inv[c];
            }
            let v = params.amplitude * (-0.5 * s).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Kernel vector `[k(X_1, p), …, k(X_n, p)]`.
pub fn kernel_vector(x: &DMatrix<f64>, p: &[f64], params: &KernelParams) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let mut s = 0.0;
        for (c, l) in params.lengthscales.iter().enumerate() {
            let d = (x[(i, c)] - p[c]) / l;
            s += d * d;
        }
        params.amplitude * (-0.5 * s).exp()
    })
}

/// How the diagonal base of a [`SpectralMeasure`] is built from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseScale {
    /// Empirical variances per dimension.
    #[default]
    Variance,
    /// Empirical standard deviations per dimension.
    StdDev,
}

/// Gaussian integrating measure `N(mean, scale · diag(base))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMeasure {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub base: Vec<f64>,
}

impl SpectralMeasure {
    pub fn new(mean: Vec<f64>, scale: f64, base: Vec<f64>) -> Result<Self> {
        let m = Self { mean, scale, base };
        m.validate()?;
        Ok(m)
    }

    /// Standard normal measure in `dim` dimensions scaled by `scale`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], scale, vec![1.0; dim])
    }

    /// Empirical mean and per-dimension spread of the rows of `v`.
    pub fn from_points(v: &DMatrix<f64>, scale: f64, base: BaseScale) -> Result<Self> {
        let n = v.nrows();
        if n < 2 {
            return Err(Error::InvalidParameter(
                "need at least two points to estimate a spectral measure".into(),
            ));
        }
        let mut mean = Vec::with_capacity(v.ncols());
        let mut spread = Vec::with_capacity(v.ncols());
        for c in 0..v.ncols() {
            let col = v.column(c);
            let mu = col.mean();
            let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64;
            let var = var.max(1e-12);
            mean.push(mu);
            spread.push(match base {
                BaseScale::Variance => var,
                BaseScale::StdDev => var.sqrt(),
            });
        }
        Self::new(mean, scale, spread)
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(self.mean.clone(), scale, self.base.clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Diagonal of the covariance `scale · base`.
    pub fn variances(&self) -> Vec<f64> {
        self.base.iter().map(|b| b * self.scale).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.base.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: self.base.len(),
            });
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "measure scale must be positive, got {}",
                self.scale
            )));
        }
        if self.base.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter(
                "measure base variances must be positive".into(),
            ));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("measure mean"));
        }
        Ok(())
    }

    /// Draws `count` points (rows) from the measure.
    pub fn sample(&self, count: usize, rng: &mut seeds::Rng) -> DMatrix<f64> {
        let sd: Vec<f64> = self.variances().iter().map(|v| v.sqrt()).collect();
        let d = self.dim();
        let mut out = DMatrix::zeros(count, d);
        for i in 0..count {
            for c in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[(i, c)] = self.mean[c] + sd[c] * z;
            }
        }
        out
    }
}

/// Evaluation route for the measure-smoothed gram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Analytic Gaussian–Gaussian convolution.
    ClosedForm,
    /// Average of `k(x,t)k(t,x')` over `samples` seeded draws `t ~ μ`.
    MonteCarlo { samples: usize, seed: u64 },
}

/// `K̃[i,j] = ∫ k(V_i,t) k(t,V_j) dμ(t)`.
pub fn smoothed_gram(
    v: &DMatrix<f64>,
    params: &KernelParams,
    measure: &SpectralMeasure,
    smoothing: Smoothing,
) -> Result<DMatrix<f64>> {
    let k = nuclear_dominant_gram(v, v, params, measure, smoothing)?;
    // The MC route is symmetric only up to summation order.
    Ok((&k + k.transpose()) * 0.5)
}

/// Cross-point version of [`smoothed_gram`]: the nuclear dominant kernel
/// `r(x,x') = ∫ k(x,t) k(t,x') dμ(t)`.
pub fn nuclear_dominant_gram(
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    params: &KernelParams,
    measure: &SpectralMeasure,
    smoothing: Smoothing,
) -> Result<DMatrix<f64>> {
    measure.validate()?;
    if measure.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: measure.dim(),
        });
    }
    check_points(x, params.dim(), "smoothed gram input")?;
    check_points(x2, params.dim(), "smoothed gram input")?;
    match smoothing {
        Smoothing::ClosedForm => Ok(closed_form(x, x2, params, measure)),
        Smoothing::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidParameter(
                    "Monte Carlo smoothing needs at least one sample".into(),
                ));
            }
            Ok(monte_carlo(x, x2, params, measure, samples, seed))
        }
    }
}

// Per dimension, with s the measure variance and m its mean:
//   ∫ exp(−(x−t)²/2ℓ² − (y−t)²/2ℓ²) N(t; m, s) dt
//     = sqrt(ℓ²/(ℓ²+2s)) · exp(−(x−y)²/4ℓ² − ((x+y)/2 − m)²/(ℓ²+2s)).
fn closed_form(
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    params: &KernelParams,
    measure: &SpectralMeasure,
) -> DMatrix<f64> {
    let vars = measure.variances();
    let d = params.dim();
    let l2: Vec<f64> = params.lengthscales.iter().map(|l| l * l).collect();
    let denom: Vec<f64> = (0..d).map(|c| l2[c] + 2.0 * vars[c]).collect();
    let prefactor: f64 = params.amplitude
        * params.amplitude
        * (0..d).map(|c| (l2[c] / denom[c]).sqrt()).product::<f64>();
    DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        let mut e = 0.0;
        for c in 0..d {
            let (a, b) = (x[(i, c)], x2[(j, c)]);
            let diff = a - b;
            let mid = 0.5 * (a + b) - measure.mean[c];
            e += diff * diff / (4.0 * l2[c]) + mid * mid / denom[c];
        }
        prefactor * (-e).exp()
    })
}

fn monte_carlo(
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    params: &KernelParams,
    measure: &SpectralMeasure,
    samples: usize,
    seed: u64,
) -> DMatrix<f64> {
    const CHUNK: usize = 4096;
    let mut rng = seeds::rng(seed);
    let mut acc = DMatrix::zeros(x.nrows(), x2.nrows());
    let mut remaining = samples;
    while remaining > 0 {
        let m = remaining.min(CHUNK);
        let t = measure.sample(m, &mut rng);
        let a = gram_unchecked(x, &t, params);
        let b = gram_unchecked(x2, &t, params);
        acc.gemm(1.0, &a, &b.transpose(), 1.0);
        remaining -= m;
    }
    acc / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pts(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows[0].len();
        DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
    }

    #[test]
    fn unit_diagonal_and_known_value() {
        let p = KernelParams::new(vec![0.7], 1.0).unwrap();
        assert_eq!(p.eval(&[0.3], &[0.3]), 1.0);
        let p = KernelParams::new(vec![1.0], 1.0).unwrap();
        assert_relative_eq!(p.eval(&[0.0], &[1.0]), 0.606_530_659_7, epsilon = 1e-10);
    }

    #[test]
    fn tau_is_amplitude() {
        assert_eq!(tau(&KernelParams::new(vec![1.0], 1.0).unwrap()), 1.0);
        assert_eq!(tau(&KernelParams::new(vec![1.0, 2.0], 2.5).unwrap()), 2.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(KernelParams::new(vec![0.0], 1.0).is_err());
        assert!(KernelParams::new(vec![1.0], -1.0).is_err());
        let p = KernelParams::isotropic(2, 1.0);
        let x = pts(&[&[0.0]]);
        assert!(matches!(
            gram(&x, &x, &p),
            Err(Error::DimensionMismatch { .. })
        ));
        let x = pts(&[&[0.0, f64::NAN]]);
        assert!(matches!(gram(&x, &x, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mc_smoothing_needs_samples() {
        let p = KernelParams::isotropic(1, 1.0);
        let m = SpectralMeasure::isotropic(1, 1.0).unwrap();
        let v = pts(&[&[0.0]]);
        let r = smoothed_gram(
            &v,
            &p,
            &m,
            Smoothing::MonteCarlo {
                samples: 0,
                seed: 1,
            },
        );
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn collapsed_measure_factorises() {
        let p = KernelParams::new(vec![0.8, 1.3], 1.7).unwrap();
        let centre = [0.4, -0.2];
        let m = SpectralMeasure::new(centre.to_vec(), 1e-14, vec![1.0, 1.0]).unwrap();
        let v = pts(&[&[0.0, 0.0], &[1.0, -0.5], &[-0.3, 0.9]]);
        let k = smoothed_gram(&v, &p, &m, Smoothing::ClosedForm).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let vi: Vec<f64> = v.row(i).iter().copied().collect();
                let vj: Vec<f64> = v.row(j).iter().copied().collect();
                let expected = p.eval(&vi, &centre) * p.eval(&centre, &vj);
                assert_relative_eq!(k[(i, j)], expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn measure_from_points_uses_requested_base() {
        let v = pts(&[&[0.0], &[2.0], &[4.0]]);
        let var = SpectralMeasure::from_points(&v, 1.0, BaseScale::Variance).unwrap();
        let sd = SpectralMeasure::from_points(&v, 1.0, BaseScale::StdDev).unwrap();
        assert_relative_eq!(var.mean[0], 2.0);
        assert_relative_eq!(var.base[0], 4.0);
        assert_relative_eq!(sd.base[0], 2.0);
    }

    #[test]
    fn gram_sym_matches_cross_gram() {
        let p = KernelParams::new(vec![0.5, 2.0], 1.3).unwrap();
        let x = pts(&[&[0.0, 1.0], &[0.3, -1.0], &[2.0, 0.5]]);
        let a = gram(&x, &x, &p).unwrap();
        let b = gram_sym(&x, &p).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-15);
    }
}
