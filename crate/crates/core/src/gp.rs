//! Hyperparameters, the two training objectives, and a finite-difference
//! ADAM optimiser over log-parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{column_std, Problem};
use crate::error::{Error, Result};
use crate::kernels::{gram_sym_unchecked, KernelParams};
use crate::linalg::{add_diagonal, Factor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const AMPLITUDE_BOUNDS: (f64, f64) = (1e-4, 1e4);
pub const NOISE_BOUNDS: (f64, f64) = (1e-6, 1e4);

/// Kernel parameters for both stages and the two noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `k_W`; `None` when W = ∅.
    pub kw: Option<KernelParams>,
    pub kv: KernelParams,
    pub kz: KernelParams,
    pub sigma2: f64,
    pub eta2: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(kw) = &self.kw {
            kw.validate()?;
        }
        self.kv.validate()?;
        self.kz.validate()?;
        for (name, v) in [("sigma2", self.sigma2), ("eta2", self.eta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Data-driven starting point: lengthscales at the column standard
    /// deviations, `a_V = Var(y)`, `σ² = Var(y)/10`, `a_Z = 1`, `η² = 0.1`.
    pub fn initial(problem: &Problem) -> Self {
        let n = problem.y.len();
        let mean = problem.y.mean();
        let var_y = (problem.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (n.max(2) - 1) as f64)
            .max(1e-6);
        let ls = |m: &DMatrix<f64>| column_std(m, 1e-2);
        ModelParams {
            kw: problem.w1.as_ref().map(|w| KernelParams {
                lengthscales: ls(w),
                amplitude: 1.0,
            }),
            kv: KernelParams {
                lengthscales: ls(&problem.v1),
                amplitude: var_y,
            },
            kz: KernelParams {
                lengthscales: ls(&problem.z2),
                amplitude: 1.0,
            },
            sigma2: 0.1 * var_y,
            eta2: 0.1,
        }
    }

    pub fn check_dims(&self, problem: &Problem) -> Result<()> {
        let mismatch = |expected, got| Err(Error::DimensionMismatch { expected, got });
        match (&self.kw, &problem.w1) {
            (Some(k), Some(w)) if k.dim() != w.ncols() => return mismatch(w.ncols(), k.dim()),
            (None, Some(w)) => return mismatch(w.ncols(), 0),
            (Some(k), None) => return mismatch(0, k.dim()),
            _ => {}
        }
        if self.kv.dim() != problem.v_dim() {
            return mismatch(problem.v_dim(), self.kv.dim());
        }
        if self.kz.dim() != problem.z_dim() {
            return mismatch(problem.z_dim(), self.kz.dim());
        }
        Ok(())
    }
}

/// `K_WW ⊙ K_VV` on the stage-1 rows (`K_VV` alone when W = ∅).
pub fn stage1_gram(problem: &Problem, params: &ModelParams) -> DMatrix<f64> {
    let kvv = gram_sym_unchecked(&problem.v1, &params.kv);
    match (&params.kw, &problem.w1) {
        (Some(kw), Some(w)) => kvv.component_mul(&gram_sym_unchecked(w, kw)),
        _ => kvv,
    }
}

/// Log density `log N(y | 0, K + noise·I)`.
pub fn gaussian_log_likelihood(k: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> Result<f64> {
    let f = Factor::new(&add_diagonal(k, noise), 0.0)?;
    let alpha = f.solve_vec(y);
    let v = -0.5 * y.dot(&alpha) - 0.5 * f.log_det() - 0.5 * y.len() as f64 * LN_2PI;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("log marginal likelihood"))
    }
}

/// Stage-1 objective `log N(y | 0, K_WW⊙K_VV + σ²I)`.
pub fn log_marginal_likelihood(problem: &Problem, params: &ModelParams) -> Result<f64> {
    params.validate()?;
    params.check_dims(problem)?;
    gaussian_log_likelihood(&stage1_gram(problem, params), &problem.y, params.sigma2)
}

/// Stage-2 objective
/// `−(τn/2)·log 2π − (τ/2)·log|K_ZZ+η²I| − ½·Tr[(K_ZZ+η²I)⁻¹K_VV]`
/// on the stage-2 rows, with `τ = k_V(0,0)`.
pub fn weighted_log_marginal_likelihood(problem: &Problem, params: &ModelParams) -> Result<f64> {
    params.validate()?;
    params.check_dims(problem)?;
    let kvv = gram_sym_unchecked(&problem.v2, &params.kv);
    weighted_objective(
        &kvv,
        &problem.z2,
        &params.kz,
        params.eta2,
        params.kv.amplitude,
    )
}

pub(crate) fn weighted_objective(
    kvv: &DMatrix<f64>,
    z: &DMatrix<f64>,
    kz: &KernelParams,
    eta2: f64,
    tau: f64,
) -> Result<f64> {
    let n = z.nrows() as f64;
    let kzz = gram_sym_unchecked(z, kz);
    let f = Factor::new(&add_diagonal(&kzz, eta2), 0.0)?;
    let trace = f.solve(kvv).trace();
    let v = -0.5 * tau * n * LN_2PI - 0.5 * tau * f.log_det() - 0.5 * trace;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("weighted log marginal likelihood"))
    }
}

/// Optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Central-difference step in log-parameter space.
    pub fd_step: f64,
    /// Stop after this many iterations without improvement of the best
    /// objective; `None` runs all iterations.
    pub patience: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.1,
            fd_step: 1e-4,
            patience: Some(100),
        }
    }
}

/// Objective value per iteration and the running best.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub objective: Vec<f64>,
    pub best: Vec<f64>,
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Maximises `f` with ADAM and finite-difference gradients inside the box
/// `[lower, upper]`. Returns the best point visited.
pub fn adam_maximize(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &AdamConfig,
) -> Result<(Vec<f64>, Trace)> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut x: Vec<f64> = x0
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect();
    let f0 = f(&x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at initial parameters"));
    }
    let mut best = (x.clone(), f0);
    let mut trace = Trace {
        objective: vec![f0],
        best: vec![f0],
    };
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut since_best = 0;
    for t in 1..=cfg.iterations {
        let g = match fd_gradient(f, &x, cfg.fd_step) {
            Ok(g) if g.iter().all(|c| c.is_finite()) => g,
            _ => break,
        };
        if g.iter().map(|c| c * c).sum::<f64>().sqrt() < 1e-10 {
            break;
        }
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            x[i] = (x[i] + cfg.learning_rate * mh / (vh.sqrt() + eps)).clamp(lower[i], upper[i]);
        }
        let val = f(&x).unwrap_or(f64::NEG_INFINITY);
        let val = if val.is_nan() { f64::NEG_INFINITY } else { val };
        if val > best.1 {
            since_best = if val > best.1 + 1e-9 * (1.0 + best.1.abs()) {
                0
            } else {
                since_best + 1
            };
            best = (x.clone(), val);
        } else {
            since_best += 1;
        }
        trace.objective.push(val);
        trace.best.push(best.1);
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    Ok((best.0, trace))
}

/// Which objective [`adam_fit`] optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `k_W` lengthscales, `k_V` lengthscales and amplitude, `σ²`.
    One,
    /// `k_Z` lengthscales and amplitude, `η²`.
    Two,
}

fn pack(stage: Stage, p: &ModelParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut push = |v: f64, b: (f64, f64)| {
        x.push(v.ln());
        lo.push(b.0.ln());
        hi.push(b.1.ln());
    };
    match stage {
        Stage::One => {
            if let Some(kw) = &p.kw {
                kw.lengthscales
                    .iter()
                    .for_each(|l| push(*l, LENGTHSCALE_BOUNDS));
            }
            p.kv.lengthscales
                .iter()
                .for_each(|l| push(*l, LENGTHSCALE_BOUNDS));
            push(p.kv.amplitude, AMPLITUDE_BOUNDS);
            push(p.sigma2, NOISE_BOUNDS);
        }
        Stage::Two => {
            p.kz.lengthscales
                .iter()
                .for_each(|l| push(*l, LENGTHSCALE_BOUNDS));
            push(p.kz.amplitude, AMPLITUDE_BOUNDS);
            push(p.eta2, NOISE_BOUNDS);
        }
    }
    (x, lo, hi)
}

fn unpack(stage: Stage, base: &ModelParams, x: &[f64]) -> ModelParams {
    let mut p = base.clone();
    let mut it = x.iter().map(|v| v.exp());
    let mut next = || it.next().expect("parameter vector length");
    match stage {
        Stage::One => {
            if let Some(kw) = &mut p.kw {
                kw.lengthscales.iter_mut().for_each(|l| *l = next());
            }
            p.kv.lengthscales.iter_mut().for_each(|l| *l = next());
            p.kv.amplitude = next();
            p.sigma2 = next();
        }
        Stage::Two => {
            p.kz.lengthscales.iter_mut().for_each(|l| *l = next());
            p.kz.amplitude = next();
            p.eta2 = next();
        }
    }
    p
}

/// Fits one stage's hyperparameters by ADAM on its objective.
pub fn adam_fit(
    stage: Stage,
    problem: &Problem,
    init: &ModelParams,
    cfg: &AdamConfig,
) -> Result<(ModelParams, Trace)> {
    init.validate()?;
    init.check_dims(problem)?;
    let (x0, lo, hi) = pack(stage, init);
    let objective = |x: &[f64]| {
        let p = unpack(stage, init, x);
        match stage {
            Stage::One => log_marginal_likelihood(problem, &p),
            Stage::Two => weighted_log_marginal_likelihood(problem, &p),
        }
    };
    let (x, trace) = adam_maximize(&objective, &x0, &lo, &hi, cfg)?;
    Ok((unpack(stage, init, &x), trace))
}

/// Fits stage 1, then stage 2 with the fitted `k_V`.
pub fn fit(problem: &Problem, init: &ModelParams, cfg: &AdamConfig) -> Result<ModelParams> {
    let (p1, _) = adam_fit(Stage::One, problem, init, cfg)?;
    let (p2, _) = adam_fit(Stage::Two, problem, &p1, cfg)?;
    Ok(p2)
}

/// Fitted parameters with the two cached factorisations
/// `K_WW⊙K_VV + σ²I` and `K_ZZ + η²I`.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub problem: Problem,
    pub params: ModelParams,
    pub(crate) stage1: Factor,
    pub(crate) stage2: Factor,
}

impl FittedModel {
    pub fn new(problem: Problem, params: ModelParams) -> Result<Self> {
        problem.validate()?;
        params.validate()?;
        params.check_dims(&problem)?;
        let k1 = add_diagonal(&stage1_gram(&problem, &params), params.sigma2);
        let k2 = add_diagonal(&gram_sym_unchecked(&problem.z2, &params.kz), params.eta2);
        let stage1 = Factor::new(&k1, 0.0)?;
        let stage2 = Factor::new(&k2, 0.0)?;
        Ok(Self {
            problem,
            params,
            stage1,
            stage2,
        })
    }

    /// Fits hyperparameters from `ModelParams::initial` and caches factors.
    pub fn train(problem: Problem, cfg: &AdamConfig) -> Result<Self> {
        let init = ModelParams::initial(&problem);
        let params = fit(&problem, &init, cfg)?;
        Self::new(problem, params)
    }

    /// Reconstruction `L Lᵀ` of the two cached matrices.
    pub fn reconstructed(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let l1 = self.stage1.l();
        let l2 = self.stage2.l();
        (&l1 * l1.transpose(), &l2 * l2.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_likelihood() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 0.0);
        let ll = gaussian_log_likelihood(&k, &y, 1.0).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert!((ll - expected).abs() < 1e-14);
    }

    #[test]
    fn adam_leaves_stationary_point() {
        let f = |x: &[f64]| Ok(-(x[0] - 0.3).powi(2) - (x[1] + 1.0).powi(2));
        let (x, trace) = adam_maximize(
            &f,
            &[0.3, -1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &AdamConfig::default(),
        )
        .unwrap();
        assert!((x[0] - 0.3).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6);
        assert_eq!(trace.best.len(), 1);
    }

    #[test]
    fn adam_finds_quadratic_maximum() {
        let f = |x: &[f64]| Ok(-(x[0] - 1.5).powi(2));
        let cfg = AdamConfig {
            patience: None,
            ..Default::default()
        };
        let (x, trace) = adam_maximize(&f, &[0.0], &[-5.0], &[5.0], &cfg).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-2);
        assert!(trace.best.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn adam_rejects_non_finite_start() {
        let f = |_: &[f64]| Ok(f64::NAN);
        assert!(adam_maximize(&f, &[0.0], &[-1.0], &[1.0], &AdamConfig::default()).is_err());
    }
}
