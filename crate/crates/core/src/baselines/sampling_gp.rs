//! Two-stage sampling GP: `Y = f(W,V) + U`, `V_d = g_d(Z) + E_d` with
//! independent GP priors, effect propagated by nested Monte Carlo.
//!
//! Each outer draw samples `g(z)` from its latent posterior, pushes
//! [`INNER_DRAWS`] noisy `V` draws through one joint draw of `f`, and
//! averages. The mean and variance over outer draws are reported.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::data::{column_std, Problem};
use crate::error::{Error, Result};
use crate::gp::{
    adam_maximize, gaussian_log_likelihood, stage1_gram, AdamConfig, ModelParams, AMPLITUDE_BOUNDS,
    LENGTHSCALE_BOUNDS, NOISE_BOUNDS,
};
use crate::kernels::{gram_sym_unchecked, gram_unchecked, kernel_vector, KernelParams};
use crate::linalg::{add_diagonal, psd_sqrt, Factor};
use crate::posterior::EvalPoint;
use crate::seeds;

pub const INNER_DRAWS: usize = 16;

/// Per-dimension stage-2 regression `V_d | Z`.
#[derive(Debug, Clone)]
struct StageTwoGp {
    params: KernelParams,
    noise: f64,
    factor: Factor,
    weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SamplingGp<'a> {
    problem: &'a Problem,
    stage1: ModelParams,
    f1: Factor,
    c: DVector<f64>,
    g: Vec<StageTwoGp>,
}

impl<'a> SamplingGp<'a> {
    /// Uses the stage-1 kernels and noise of `stage1` (the same likelihood
    /// as the main model) and fits one GP per V dimension on stage-2 rows.
    pub fn fit(problem: &'a Problem, stage1: &ModelParams, cfg: &AdamConfig) -> Result<Self> {
        stage1.validate()?;
        stage1.check_dims(problem)?;
        let k1 = add_diagonal(&stage1_gram(problem, stage1), stage1.sigma2);
        let f1 = Factor::new(&k1, 0.0)?;
        let c = f1.solve_vec(&problem.y);
        let z = &problem.z2;
        let ls0 = column_std(z, 1e-2);
        let mut g = Vec::with_capacity(problem.v_dim());
        for d in 0..problem.v_dim() {
            let target: DVector<f64> = problem.v2.column(d).into_owned();
            let mean = target.mean();
            let var = (target.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (target.len().max(2) - 1) as f64)
                .max(1e-6);
            let mut x0: Vec<f64> = ls0.iter().map(|l| l.ln()).collect();
            x0.push(var.ln());
            x0.push((0.1 * var).ln());
            let mut lo = vec![LENGTHSCALE_BOUNDS.0.ln(); ls0.len()];
            let mut hi = vec![LENGTHSCALE_BOUNDS.1.ln(); ls0.len()];
            lo.extend([AMPLITUDE_BOUNDS.0.ln(), NOISE_BOUNDS.0.ln()]);
            hi.extend([AMPLITUDE_BOUNDS.1.ln(), NOISE_BOUNDS.1.ln()]);
            let dz = ls0.len();
            let unpack = |x: &[f64]| {
                (
                    KernelParams {
                        lengthscales: x[..dz].iter().map(|v| v.exp()).collect(),
                        amplitude: x[dz].exp(),
                    },
                    x[dz + 1].exp(),
                )
            };
            let objective = |x: &[f64]| {
                let (kp, noise) = unpack(x);
                gaussian_log_likelihood(&gram_sym_unchecked(z, &kp), &target, noise)
            };
            let (x, _) = adam_maximize(&objective, &x0, &lo, &hi, cfg)?;
            let (params, noise) = unpack(&x);
            let factor = Factor::new(&add_diagonal(&gram_sym_unchecked(z, &params), noise), 0.0)?;
            let weights = factor.solve_vec(&target);
            g.push(StageTwoGp {
                params,
                noise,
                factor,
                weights,
            });
        }
        Ok(Self {
            problem,
            stage1: stage1.clone(),
            f1,
            c,
            g,
        })
    }

    /// Monte Carlo mean and variance of the effect at each point.
    pub fn effect(
        &self,
        points: &[EvalPoint],
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<(f64, f64)>> {
        if n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be positive".into()));
        }
        let p = self.problem;
        points
            .iter()
            .enumerate()
            .map(|(k, pt)| {
                if pt.w.len() != p.w_dim() || pt.z.len() != p.z_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: p.w_dim() + p.z_dim(),
                        got: pt.w.len() + pt.z.len(),
                    });
                }
                Ok(self.effect_at(pt, n_samples, seeds::derive(seed, k as u64)))
            })
            .collect()
    }

    fn effect_at(&self, pt: &EvalPoint, n_samples: usize, seed: u64) -> (f64, f64) {
        let p = self.problem;
        let mut rng = seeds::rng(seed);
        let dv = p.v_dim();
        let (mu_g, sd_g): (Vec<f64>, Vec<f64>) = self
            .g
            .iter()
            .map(|g| {
                let kz = kernel_vector(&p.z2, &pt.z, &g.params);
                let m = kz.dot(&g.weights);
                let var = g.params.amplitude - kz.dot(&g.factor.solve_vec(&kz));
                (m, var.max(0.0).sqrt())
            })
            .unzip();
        let h = match (&self.stage1.kw, &p.w1) {
            (Some(kw), Some(w1)) => kernel_vector(w1, &pt.w, kw),
            _ => DVector::from_element(p.n1(), 1.0),
        };
        let kww = self.stage1.kw.as_ref().map_or(1.0, |k| k.amplitude);
        let mut draws = Vec::with_capacity(n_samples);
        let mut vs = DMatrix::zeros(INNER_DRAWS, dv);
        for _ in 0..n_samples {
            for d in 0..dv {
                let e: f64 = StandardNormal.sample(&mut rng);
                let g = mu_g[d] + sd_g[d] * e;
                let sd_noise = self.g[d].noise.sqrt();
                for j in 0..INNER_DRAWS {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    vs[(j, d)] = g + sd_noise * e;
                }
            }
            let mut ks = gram_unchecked(&vs, &p.v1, &self.stage1.kv);
            for mut row in ks.row_iter_mut() {
                row.component_mul_assign(&h.transpose());
            }
            let mean = &ks * &self.c;
            let l = self.f1.solve_lower(&ks.transpose());
            let cov = gram_unchecked(&vs, &vs, &self.stage1.kv) * kww - l.transpose() * l;
            let root = psd_sqrt(&cov);
            let e = DVector::from_fn(INNER_DRAWS, |_, _| -> f64 {
                StandardNormal.sample(&mut rng)
            });
            let f = mean + root * e;
            draws.push(f.mean());
        }
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (m, v)
    }
}

/// Fits the stage-2 GPs and returns the effect moments at one point.
pub fn sampling_gp_effect(
    problem: &Problem,
    stage1: &ModelParams,
    cfg: &AdamConfig,
    point: &EvalPoint,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let gp = SamplingGp::fit(problem, stage1, cfg)?;
    Ok(gp.effect(std::slice::from_ref(point), n_samples, seed)?[0])
}
