//! Finite-dimensional posterior with a nuclear-dominant kernel.
//!
//! `f` has covariance `k_W ⊗ r_V` with `r_V(v,v') = ∫ k_V(v,t)k_V(t,v') dμ(t)`
//! and is projected onto `Σ_i a_i k_{W,V}((W_i,V_i), ·)` over the
//! concatenated V points `U`; `μ(z)` is projected onto
//! `Σ_i b_i(z) k_V(U_i, ·)`. With `D = diag(k_W(W_U, w))` and `K = K_UU`:
//!
//! ```text
//! mean = m_aᵀ D K m_b
//! var  = m_aᵀ D K C_b K D m_a + m_bᵀ D K C_a K D m_b + Tr[C_a D K C_b K D]
//! ```
//!
//! The inverses of the plain grams in `m_a, C_a, m_b, C_b` go through the
//! jitter ladder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Problem;
use crate::error::{Error, Result};
use crate::gp::{
    adam_fit, adam_maximize, gaussian_log_likelihood, AdamConfig, ModelParams, Stage,
    AMPLITUDE_BOUNDS, LENGTHSCALE_BOUNDS, NOISE_BOUNDS,
};
use crate::kernels::{
    gram_unchecked, nuclear_dominant_gram, BaseScale, Smoothing, SpectralMeasure,
};
use crate::linalg::{add_diagonal, symmetrize, Factor};
use crate::posterior::{curve_z_blocks, EvalPoint, JointMoments, PosteriorMoments};

const VARSIGMA_BOUNDS: (f64, f64) = (1e-3, 1e3);

/// Hyperparameters plus the scale `ς` of the measure `N(V̄, ς·Ŝ)` that
/// defines `r_V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesImpParams {
    pub model: ModelParams,
    pub varsigma: f64,
}

fn measure(problem: &Problem, varsigma: f64) -> Result<SpectralMeasure> {
    SpectralMeasure::from_points(&problem.v1, varsigma, BaseScale::Variance)
}

/// `K_WW ⊙ R_VV` on the stage-1 rows.
fn stage1_nuclear_gram(
    problem: &Problem,
    params: &ModelParams,
    mu: &SpectralMeasure,
) -> Result<DMatrix<f64>> {
    let r = nuclear_dominant_gram(
        &problem.v1,
        &problem.v1,
        &params.kv,
        mu,
        Smoothing::ClosedForm,
    )?;
    Ok(match (&params.kw, &problem.w1) {
        (Some(kw), Some(w)) => r.component_mul(&gram_unchecked(w, w, kw)),
        _ => r,
    })
}

/// Stage-1 objective `log N(y | 0, K_WW⊙R_VV + σ²I)`.
pub fn log_marginal_likelihood(problem: &Problem, params: &BayesImpParams) -> Result<f64> {
    params.model.validate()?;
    params.model.check_dims(problem)?;
    let mu = measure(problem, params.varsigma)?;
    let k = stage1_nuclear_gram(problem, &params.model, &mu)?;
    gaussian_log_likelihood(&symmetrize(&k), &problem.y, params.model.sigma2)
}

/// Fits stage 1 on the nuclear-dominant likelihood (optionally including
/// `ς`), then stage 2 on the weighted objective shared with the main model.
pub fn fit(
    problem: &Problem,
    init: &ModelParams,
    cfg: &AdamConfig,
    optimize_varsigma: bool,
) -> Result<BayesImpParams> {
    let mut x0 = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut push = |v: f64, b: (f64, f64)| {
        x0.push(v.ln());
        lo.push(b.0.ln());
        hi.push(b.1.ln());
    };
    if let Some(kw) = &init.kw {
        kw.lengthscales
            .iter()
            .for_each(|l| push(*l, LENGTHSCALE_BOUNDS));
    }
    init.kv
        .lengthscales
        .iter()
        .for_each(|l| push(*l, LENGTHSCALE_BOUNDS));
    push(init.kv.amplitude, AMPLITUDE_BOUNDS);
    push(init.sigma2, NOISE_BOUNDS);
    if optimize_varsigma {
        push(1.0, VARSIGMA_BOUNDS);
    }
    let unpack = |x: &[f64]| {
        let mut p = BayesImpParams {
            model: init.clone(),
            varsigma: 1.0,
        };
        let mut it = x.iter().map(|v| v.exp());
        if let Some(kw) = &mut p.model.kw {
            kw.lengthscales
                .iter_mut()
                .for_each(|l| *l = it.next().unwrap());
        }
        p.model
            .kv
            .lengthscales
            .iter_mut()
            .for_each(|l| *l = it.next().unwrap());
        p.model.kv.amplitude = it.next().unwrap();
        p.model.sigma2 = it.next().unwrap();
        if let Some(s) = it.next() {
            p.varsigma = s;
        }
        p
    };
    let objective = |x: &[f64]| log_marginal_likelihood(problem, &unpack(x));
    let (x, _) = adam_maximize(&objective, &x0, &lo, &hi, cfg)?;
    let mut p = unpack(&x);
    p.model = adam_fit(Stage::Two, problem, &p.model, cfg)?.0;
    Ok(p)
}

/// Precomputed coefficient moments.
#[derive(Debug, Clone)]
pub struct BayesImp<'a> {
    problem: &'a Problem,
    params: &'a BayesImpParams,
    w_u: Option<DMatrix<f64>>,
    kuu: DMatrix<f64>,
    m_a: DVector<f64>,
    c_a: DMatrix<f64>,
    /// `K C_b K / k̂(z,z) = K(K+ε)⁻¹ R_UU (K+ε)⁻¹K`.
    q: DMatrix<f64>,
    /// `C_a ⊙ Q`.
    caq: DMatrix<f64>,
    /// `(K+ε)⁻¹ K_{U,V₂}`, mapping `β(z)` to `m_b(z)`.
    s: DMatrix<f64>,
    stage2: Factor,
}

impl<'a> BayesImp<'a> {
    pub fn new(problem: &'a Problem, params: &'a BayesImpParams) -> Result<Self> {
        problem.validate()?;
        let mp = &params.model;
        mp.validate()?;
        mp.check_dims(problem)?;
        if problem.fusion && problem.w1.is_some() {
            return Err(Error::Config(
                "the nuclear-dominant baseline supports fusion only with W = ∅".into(),
            ));
        }
        let mu = measure(problem, params.varsigma)?;
        let u = if problem.fusion {
            let mut u = DMatrix::zeros(problem.n1() + problem.n2(), problem.v_dim());
            u.rows_mut(0, problem.n1()).copy_from(&problem.v1);
            u.rows_mut(problem.n1(), problem.n2())
                .copy_from(&problem.v2);
            u
        } else {
            problem.v1.clone()
        };
        let w_u = if problem.fusion {
            None
        } else {
            problem.w1.clone()
        };
        let kw_gram =
            |a: &DMatrix<f64>, b: &DMatrix<f64>| mp.kw.as_ref().map(|kw| gram_unchecked(a, b, kw));

        let r = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            nuclear_dominant_gram(a, b, &mp.kv, &mu, Smoothing::ClosedForm)
        };
        let mut k1 = stage1_nuclear_gram(problem, mp, &mu)?;
        k1 = add_diagonal(&symmetrize(&k1), mp.sigma2);
        let f1 = Factor::new(&k1, 0.0)?;
        let mut kf_u1 = r(&u, &problem.v1)?;
        let mut kf_uu = r(&u, &u)?;
        let ruu = symmetrize(&kf_uu);
        if let (Some(wu), Some(w1)) = (&w_u, &problem.w1) {
            kf_u1.component_mul_assign(&kw_gram(wu, w1).unwrap());
            kf_uu.component_mul_assign(&kw_gram(wu, wu).unwrap());
        }
        let m_f = &kf_u1 * f1.solve_vec(&problem.y);
        let x = f1.solve_lower(&kf_u1.transpose());
        let r_f = symmetrize(&(kf_uu - x.transpose() * x));

        let kuu = gram_unchecked(&u, &u, &mp.kv);
        let kwv = match &w_u {
            Some(wu) => kuu.component_mul(&kw_gram(wu, wu).unwrap()),
            None => kuu.clone(),
        };
        let p1 = Factor::new(&kwv, 0.0)?.inverse();
        let m_a = &p1 * m_f;
        let c_a = symmetrize(&(&p1 * r_f * &p1));

        let fk = Factor::new(&kuu, 0.0)?;
        let pk = fk.solve(&kuu);
        let q = symmetrize(&(pk.transpose() * ruu * &pk));
        let s = fk.solve(&gram_unchecked(&u, &problem.v2, &mp.kv));
        let kzz = gram_unchecked(&problem.z2, &problem.z2, &mp.kz);
        let stage2 = Factor::new(&add_diagonal(&kzz, mp.eta2), 0.0)?;
        let caq = c_a.component_mul(&q);
        Ok(Self {
            problem,
            params,
            w_u,
            kuu,
            m_a,
            c_a,
            q,
            caq,
            s,
            stage2,
        })
    }

    fn h(&self, ws: &DMatrix<f64>) -> DMatrix<f64> {
        match (&self.params.model.kw, &self.w_u) {
            (Some(kw), Some(wu)) => gram_unchecked(wu, ws, kw),
            _ => DMatrix::from_element(self.kuu.nrows(), ws.nrows(), 1.0),
        }
    }

    fn assemble(
        &self,
        h: &DMatrix<f64>,
        kz_cross: &DMatrix<f64>,
        kz_pp: &DMatrix<f64>,
    ) -> JointMoments {
        let b = self.stage2.solve(kz_cross);
        let khat = symmetrize(&(kz_pp - kz_cross.transpose() * &b));
        let mb = &self.s * b;
        let mut hm = h.clone();
        for mut col in hm.column_iter_mut() {
            col.component_mul_assign(&self.m_a);
        }
        let kmb = &self.kuu * &mb;
        let mean = DVector::from_fn(h.ncols(), |p, _| hm.column(p).dot(&kmb.column(p)));
        let t1 = khat.component_mul(&(hm.transpose() * &self.q * &hm));
        let x = &self.kuu * h.component_mul(&mb);
        let t2 = x.transpose() * &self.c_a * &x;
        let t3 = khat.component_mul(&(h.transpose() * &self.caq * h));
        JointMoments {
            mean,
            s1: symmetrize(&t1),
            s2: symmetrize(&t2),
            s3: symmetrize(&t3),
        }
    }

    pub fn joint(&self, points: &[EvalPoint]) -> Result<JointMoments> {
        let p = self.problem;
        for pt in points {
            if pt.w.len() != p.w_dim() || pt.z.len() != p.z_dim() {
                return Err(Error::DimensionMismatch {
                    expected: p.w_dim() + p.z_dim(),
                    got: pt.w.len() + pt.z.len(),
                });
            }
        }
        let ws = DMatrix::from_fn(points.len(), p.w_dim(), |i, j| points[i].w[j]);
        let zs = DMatrix::from_fn(points.len(), p.z_dim(), |i, j| points[i].z[j]);
        let kz = &self.params.model.kz;
        let kz_cross = gram_unchecked(&p.z2, &zs, kz);
        let kz_pp = gram_unchecked(&zs, &zs, kz);
        Ok(self.assemble(&self.h(&ws), &kz_cross, &kz_pp))
    }

    pub fn moments(&self, point: &EvalPoint) -> Result<PosteriorMoments> {
        self.joint(std::slice::from_ref(point))?
            .moments(0, point.clone())
    }

    /// Pointwise means and variances.
    pub fn pointwise(&self, points: &[EvalPoint]) -> Result<Vec<(f64, f64)>> {
        let j = self.joint(points)?;
        (0..points.len())
            .map(|i| Ok((j.mean[i], j.variance(i)?)))
            .collect()
    }

    /// Average effects along a curve; see `Posterior::ate_curve`.
    pub fn ate_curve(
        &self,
        w: &[f64],
        intervention_dims: &[usize],
        grid: &[Vec<f64>],
        marginal: &[Vec<f64>],
    ) -> Result<JointMoments> {
        let p = self.problem;
        if w.len() != p.w_dim() {
            return Err(Error::DimensionMismatch {
                expected: p.w_dim(),
                got: w.len(),
            });
        }
        let (kz_cross, kz_pp) = curve_z_blocks(
            &p.z2,
            &self.params.model.kz,
            intervention_dims,
            grid,
            marginal,
        )?;
        let ws = DMatrix::from_fn(grid.len(), w.len(), |_, j| w[j]);
        Ok(self.assemble(&self.h(&ws), &kz_cross, &kz_pp))
    }
}
