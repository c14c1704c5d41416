//! Cholesky factorisation with a bounded jitter ladder, plus small dense
//! helpers shared by the posterior code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Largest diagonal jitter the ladder will add before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// A Cholesky factor of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factor {
    /// Factorises `a + jitter·I`, escalating the jitter by ×10 from
    /// `max(10·jitter, 1e-10·trace(a)/n)` up to [`MAX_JITTER`].
    pub fn new(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if !(jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jitter must be non-negative, got {jitter}"
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix to factorise"));
        }
        let n = a.nrows();
        if let Some(f) = try_factor(a, jitter) {
            return Ok(f);
        }
        let base = if n == 0 {
            0.0
        } else {
            a.trace().abs() / n as f64
        };
        let mut j = (jitter * 10.0).max(1e-10 * base).max(f64::MIN_POSITIVE);
        let mut last = jitter;
        while j <= MAX_JITTER {
            if let Some(f) = try_factor(a, j) {
                log::debug!("cholesky needed jitter {j:e}");
                return Ok(f);
            }
            last = j;
            j *= 10.0;
        }
        if last < MAX_JITTER {
            if let Some(f) = try_factor(a, MAX_JITTER) {
                log::debug!("cholesky needed jitter {MAX_JITTER:e}");
                return Ok(f);
            }
        }
        Err(Error::NotPositiveDefinite { jitter: MAX_JITTER })
    }

    /// Jitter actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solves `L x = b` for the lower factor.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }
}

fn try_factor(a: &DMatrix<f64>, jitter: f64) -> Option<Factor> {
    let mut m = a.clone();
    if jitter > 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(m)?;
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0 && l[(i, i)].is_finite())) {
        return None;
    }
    Some(Factor { chol, jitter })
}

/// `(A + jitter·I)⁻¹ B` through the jitter ladder.
pub fn chol_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(Factor::new(a, jitter)?.solve(b))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn add_diagonal(a: &DMatrix<f64>, v: f64) -> DMatrix<f64> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
    m
}

/// Symmetric square root `C^{1/2}` with negative eigenvalues floored at 0.
pub fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(c).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
