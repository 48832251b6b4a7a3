//! Negative ELBO pieces, the Woodbury-form negative log-likelihood, θ
//! derivatives of the ELBO and the eigenvalue Hessian modification.
//!
//! Everything the engine needs from a machine's data at a given kernel
//! parameter is summarized by [`LocalStats`]: m × m and m × p projections
//! of the data onto the knot correlation basis. Because the predictive
//! process basis B = R(β) R_K(β)⁻¹ is free of σ, these statistics depend
//! on β (and the fixed ν) only; σ enters solely through K(θ) = σ² R_K(β).

use std::f64::consts::PI;

use crate::covkernel::{
    correlation_matrix, correlation_matrix_dbeta2, factor_knot_matrix, knot_correlation, knot_correlation_dbeta2,
    BasisMatrices, Correlation, MaternParams,
};
use crate::error::{Error, Result};
use crate::geo::{KnotSet, SpatialDataset};
use crate::linalg::{self, Mat, SpdFactor, Vector};

/// Index of σ and β inside θ-gradients and Hessians.
pub const SIGMA: usize = 0;
pub const BETA: usize = 1;

/// Model parameters: regression coefficients, nugget precision and kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gamma: Vector,
    /// δ = τ⁻².
    pub delta: f64,
    pub theta: MaternParams,
}

impl ModelParams {
    pub fn new(gamma: Vector, delta: f64, theta: MaternParams) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::arg(format!("precision δ must be positive, got {delta}")));
        }
        theta.validate()?;
        Ok(ModelParams { gamma, delta, theta })
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().all(|v| v.is_finite())
            && self.delta.is_finite()
            && self.theta.sigma.is_finite()
            && self.theta.beta.is_finite()
    }
}

/// Gaussian variational factor N(μ, Σ) over the m knot values.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu: Vector,
    pub sigma: Mat,
}

impl VariationalState {
    pub fn new(mu: Vector, sigma: Mat) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::arg("variational mean and covariance disagree in size"));
        }
        Ok(VariationalState { mu, sigma })
    }

    /// Σ + μμᵀ.
    pub fn second_moment(&self) -> Mat {
        &self.sigma + &self.mu * self.mu.transpose()
    }
}

/// Gradient and Hessian with respect to (σ, β).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDerivs {
    pub grad: Vector,
    pub hess: Mat,
}

impl ThetaDerivs {
    pub fn zeros() -> Self {
        ThetaDerivs { grad: Vector::zeros(2), hess: Mat::zeros(2, 2) }
    }

    pub fn scaled(&self, s: f64) -> Self {
        ThetaDerivs { grad: &self.grad * s, hess: &self.hess * s }
    }

    pub fn add(&self, other: &ThetaDerivs) -> Self {
        ThetaDerivs { grad: &self.grad + &other.grad, hess: &self.hess + &other.hess }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivMode {
    /// Closed-form gradient and Hessian.
    #[default]
    Analytic,
    /// Gradient and Hessian both from central differences of values.
    FiniteDifference,
}

/// θ-free moments of a dataset.
#[derive(Debug, Clone)]
pub struct DataMoments {
    pub n: usize,
    pub ztz: f64,
    pub xtz: Vector,
    pub xtx: Mat,
}

impl DataMoments {
    pub fn new(data: &SpatialDataset) -> Self {
        DataMoments {
            n: data.len(),
            ztz: data.z.dot(&data.z),
            xtz: data.x.transpose() * &data.z,
            xtx: data.x.transpose() * &data.x,
        }
    }

    /// ‖z - Xγ‖².
    pub fn rss(&self, gamma: &Vector) -> f64 {
        if gamma.is_empty() {
            return self.ztz;
        }
        self.ztz - 2.0 * gamma.dot(&self.xtz) + gamma.dot(&(&self.xtx * gamma))
    }
}

/// β-derivative pieces of [`LocalStats`].
#[derive(Debug, Clone)]
struct StatsDeriv {
    drk: Mat,
    rtdr: Mat,
    drtz: Vector,
    drtx: Mat,
    d2rk: Mat,
    drtdr: Mat,
    rtd2r: Mat,
    d2rtz: Vector,
    d2rtx: Mat,
}

/// A machine's data projected on the knot basis at one (β, ν).
#[derive(Debug, Clone)]
pub struct LocalStats {
    pub beta: f64,
    rk_factor: SpdFactor,
    rk_inv: Mat,
    rtr: Mat,
    rtz: Vector,
    rtx: Mat,
    deriv: Option<StatsDeriv>,
}

impl LocalStats {
    pub fn compute(
        data: &SpatialDataset,
        knots: &KnotSet,
        corr: &Correlation,
        beta: f64,
        jitter: f64,
        with_deriv: bool,
    ) -> Result<Self> {
        let finish = |rk: Mat, r: Mat, deriv: Option<StatsDeriv>| -> Result<Self> {
            let rk_factor = factor_knot_matrix(&rk, jitter)?;
            let rk_inv = rk_factor.inverse();
            let rt = r.transpose();
            let mut rtr = &rt * &r;
            linalg::symmetrize(&mut rtr);
            Ok(LocalStats { beta, rk_factor, rk_inv, rtr, rtz: &rt * &data.z, rtx: &rt * &data.x, deriv })
        };
        if !with_deriv {
            let (rk, _) = knot_correlation(knots, beta, corr, false);
            let (r, _) = correlation_matrix(&data.locations, knots.locations(), beta, corr, false);
            return finish(rk, r, None);
        }
        let [rk, drk, d2rk] = knot_correlation_dbeta2(knots, beta, corr);
        let [r, dr, d2r] = correlation_matrix_dbeta2(&data.locations, knots.locations(), beta, corr);
        let drt = dr.transpose();
        let d2rt = d2r.transpose();
        let mut drtdr = &drt * &dr;
        linalg::symmetrize(&mut drtdr);
        let deriv = StatsDeriv {
            drk,
            rtdr: r.transpose() * &dr,
            drtz: &drt * &data.z,
            drtx: &drt * &data.x,
            d2rk,
            drtdr,
            rtd2r: r.transpose() * &d2r,
            d2rtz: &d2rt * &data.z,
            d2rtx: &d2rt * &data.x,
        };
        finish(rk, r, Some(deriv))
    }

    pub fn has_deriv(&self) -> bool {
        self.deriv.is_some()
    }

    pub fn m(&self) -> usize {
        self.rtr.nrows()
    }

    /// Inverse of the (jittered) knot correlation matrix R_K.
    pub fn rk_inv(&self) -> &Mat {
        &self.rk_inv
    }

    pub fn rk_log_det(&self) -> f64 {
        self.rk_factor.log_det()
    }

    /// K(θ)⁻¹ = R_K⁻¹ / σ².
    pub fn k_inv(&self, sigma: f64) -> Mat {
        &self.rk_inv / (sigma * sigma)
    }

    pub fn k_log_det(&self, sigma: f64) -> f64 {
        self.rk_log_det() + self.m() as f64 * (sigma * sigma).ln()
    }

    /// BᵀB.
    pub fn btb(&self) -> Mat {
        let mut out = &self.rk_inv * &self.rtr * &self.rk_inv;
        linalg::symmetrize(&mut out);
        out
    }

    fn rtr_resid(&self, gamma: &Vector) -> Vector {
        if gamma.is_empty() {
            self.rtz.clone()
        } else {
            &self.rtz - &self.rtx * gamma
        }
    }

    /// Bᵀ(z - Xγ).
    pub fn btr(&self, gamma: &Vector) -> Vector {
        &self.rk_inv * self.rtr_resid(gamma)
    }

    /// XᵀB (p × m).
    pub fn xtb(&self) -> Mat {
        (&self.rk_inv * &self.rtx).transpose()
    }

    /// The β-derivative of f_j at fixed (μ, Σ, γ, δ):
    /// δ·[tr(Bᵀ∂B (Σ+μμᵀ)) - μᵀ ∂Bᵀ(z - Xγ)].
    pub fn dfj_dbeta(&self, v: &VariationalState, gamma: &Vector, delta: f64) -> Result<f64> {
        let d = self.derivs()?;
        let rinv = &self.rk_inv;
        // Bᵀ∂B = R_K⁻¹ [Rᵀ∂R - RᵀR R_K⁻¹ ∂R_K] R_K⁻¹
        let inner = &d.rtdr - &self.rtr * rinv * &d.drk;
        let bt_db = rinv * inner * rinv;
        // ∂Bᵀr = R_K⁻¹ [∂Rᵀr - ∂R_K R_K⁻¹ Rᵀr]
        let rt_r = self.rtr_resid(gamma);
        let dr_r = if gamma.is_empty() { d.drtz.clone() } else { &d.drtz - &d.drtx * gamma };
        let db_r = rinv * (dr_r - &d.drk * (rinv * &rt_r));
        let m2 = v.second_moment();
        Ok(delta * (linalg::trace_of_product(&bt_db, &m2) - v.mu.dot(&db_r)))
    }

    fn derivs(&self) -> Result<&StatsDeriv> {
        self.deriv
            .as_ref()
            .ok_or_else(|| Error::arg("local statistics were computed without derivatives"))
    }

    /// ∂²f_j/∂β² at fixed (μ, Σ, γ, δ). With P = R_K⁻¹, G = RᵀR, g = Rᵀr and
    /// M = Σ+μμᵀ, f_j = (δ/2)tr(GPMP) - δμᵀPg + const.
    pub fn d2fj_dbeta2(&self, v: &VariationalState, gamma: &Vector, delta: f64) -> Result<f64> {
        let d = self.derivs()?;
        let p = &self.rk_inv;
        let m2 = v.second_moment();
        let g1 = &d.rtdr + d.rtdr.transpose();
        let g2 = &d.rtd2r + d.rtd2r.transpose() + &d.drtdr * 2.0;
        let p_d1 = p * &d.drk;
        let p1 = -(&p_d1 * p);
        let p2 = -(p * &d.d2rk * p) + &p_d1 * &p_d1 * p * 2.0;
        let mp = &m2 * p;
        let a = p * &mp;
        let quad = linalg::trace_of_product(&g2, &a)
            + 4.0 * linalg::trace_of_product(&g1, &(&p1 * &mp))
            + 2.0 * linalg::trace_of_product(&self.rtr, &(&p2 * &mp))
            + 2.0 * linalg::trace_of_product(&self.rtr, &(&p1 * &m2 * &p1));
        let (r0, r1, r2) = if gamma.is_empty() {
            (self.rtz.clone(), d.drtz.clone(), d.d2rtz.clone())
        } else {
            (self.rtr_resid(gamma), &d.drtz - &d.drtx * gamma, &d.d2rtz - &d.d2rtx * gamma)
        };
        let lin = v.mu.dot(&(&p2 * r0 + &p1 * r1 * 2.0 + p * r2));
        Ok(delta * (0.5 * quad - lin))
    }

    /// f_j evaluated from the statistics.
    pub fn fj(&self, moments: &DataMoments, v: &VariationalState, gamma: &Vector, delta: f64) -> f64 {
        let n = moments.n as f64;
        let btb = self.btb();
        let quad = linalg::trace_of_product(&btb, &v.second_moment());
        0.5 * n * (2.0 * PI).ln() - 0.5 * n * delta.ln() + 0.5 * delta * quad - delta * self.btr(gamma).dot(&v.mu)
            + 0.5 * delta * moments.rss(gamma)
    }

    /// The residual functional l_j = tr[BᵀB(Σ+μμᵀ)] - 2rᵀBμ + rᵀr whose
    /// global average fixes the optimal δ.
    pub fn l_term(&self, moments: &DataMoments, v: &VariationalState, gamma: &Vector) -> f64 {
        linalg::trace_of_product(&self.btb(), &v.second_moment()) - 2.0 * self.btr(gamma).dot(&v.mu) + moments.rss(gamma)
    }
}

/// f_j = -E_q log p(z_j | η) from explicit basis matrices.
pub fn local_elbo_fj(data: &SpatialDataset, basis: &BasisMatrices, v: &VariationalState, params: &ModelParams) -> f64 {
    let n = data.len() as f64;
    let delta = params.delta;
    let r = residual(data, &params.gamma);
    let b = &basis.b;
    let btb = b.transpose() * b;
    0.5 * n * (2.0 * PI).ln() - 0.5 * n * delta.ln() + 0.5 * delta * linalg::trace_of_product(&btb, &v.second_moment())
        - delta * r.dot(&(b * &v.mu))
        + 0.5 * delta * r.dot(&r)
}

pub fn residual(data: &SpatialDataset, gamma: &Vector) -> Vector {
    if gamma.is_empty() {
        data.z.clone()
    } else {
        &data.z - &data.x * gamma
    }
}

/// KL(N(μ, Σ) ‖ N(0, K)).
pub fn kl_h(v: &VariationalState, k: &Mat) -> Result<f64> {
    let kf = SpdFactor::new(k, "prior covariance K")?;
    let sf = SpdFactor::new(&v.sigma, "variational covariance Σ")?;
    Ok(kl_from_factor(v, &kf.inverse(), kf.log_det(), sf.log_det()))
}

fn kl_from_factor(v: &VariationalState, k_inv: &Mat, k_log_det: f64, sigma_log_det: f64) -> f64 {
    let m = v.mu.len() as f64;
    0.5 * (v.mu.dot(&(k_inv * &v.mu)) + linalg::trace_of_product(k_inv, &v.sigma) - sigma_log_det + k_log_det - m)
}

/// h evaluated with K(θ) = σ² R_K taken from `stats`.
pub fn kl_h_stats(v: &VariationalState, stats: &LocalStats, sigma: f64) -> Result<f64> {
    let sf = SpdFactor::new(&v.sigma, "variational covariance Σ")?;
    Ok(kl_from_factor(v, &stats.k_inv(sigma), stats.k_log_det(sigma), sf.log_det()))
}

/// Gradient and Hessian of h in (σ, β) at fixed (μ, Σ). Writing
/// K = σ²R_K, h = ½[σ⁻²T + m log σ² + log|R_K|] + const with T = tr(R_K⁻¹M).
fn kl_h_derivs(v: &VariationalState, rk_inv: &Mat, drk: &Mat, d2rk: &Mat, sigma: f64) -> ThetaDerivs {
    let m = v.mu.len() as f64;
    let m2 = v.second_moment();
    let p = rk_inv;
    let p_d1 = p * drk;
    let p_m = p * &m2;
    let t = p_m.trace();
    let t1 = -linalg::trace_of_product(&(&p_d1 * p), &m2);
    let t2 = 2.0 * linalg::trace_of_product(&(&p_d1 * &p_d1), &p_m) - linalg::trace_of_product(&(p * d2rk), &p_m);
    let l1 = p_d1.trace();
    let l2 = linalg::trace_of_product(p, d2rk) - linalg::trace_of_product(&p_d1, &p_d1);
    let s2 = sigma * sigma;
    let grad = Vector::from_vec(vec![-t / (s2 * sigma) + m / sigma, 0.5 * (t1 / s2 + l1)]);
    let cross = -t1 / (s2 * sigma);
    let hess = Mat::from_row_slice(2, 2, &[3.0 * t / (s2 * s2) - m / s2, cross, cross, 0.5 * (t2 / s2 + l2)]);
    ThetaDerivs { grad, hess }
}

/// Central-difference step for coordinate value `x`, kept inside the
/// positive orthant.
fn fd_step(x: f64, rel: f64) -> f64 {
    (rel * (1.0 + x.abs())).min(0.25 * x.abs())
}

const GRAD_STEP: f64 = 1e-6;
const VALUE_HESS_STEP: f64 = 1e-4;

/// Derivatives of the common term h with respect to (σ, β).
pub fn h_theta_derivs(v: &VariationalState, knots: &KnotSet, theta: &MaternParams, jitter: f64, mode: DerivMode) -> Result<ThetaDerivs> {
    let corr = Correlation::new(theta.nu);
    if mode == DerivMode::Analytic {
        let [rk, drk, d2rk] = knot_correlation_dbeta2(knots, theta.beta, &corr);
        let f = factor_knot_matrix(&rk, jitter)?;
        let out = kl_h_derivs(v, &f.inverse(), &drk, &d2rk, theta.sigma);
        check_finite_derivs(&out.grad, &out.hess)?;
        return Ok(out);
    }
    let sf = SpdFactor::new(&v.sigma, "variational covariance Σ")?;
    let sig_ld = sf.log_det();
    let value_at = |sigma: f64, beta: f64| -> Result<f64> {
        let (rk, _) = knot_correlation(knots, beta, &corr, false);
        let f = factor_knot_matrix(&rk, jitter)?;
        let m = rk.nrows() as f64;
        Ok(kl_from_factor(v, &(f.inverse() / (sigma * sigma)), f.log_det() + m * (sigma * sigma).ln(), sig_ld))
    };
    fd_theta_derivs(theta, &value_at)
}

/// Central-difference gradient and second-difference Hessian of a scalar
/// function of (σ, β).
fn fd_theta_derivs(theta: &MaternParams, value_at: &dyn Fn(f64, f64) -> Result<f64>) -> Result<ThetaDerivs> {
    let at = [theta.sigma, theta.beta];
    let shift = |k: usize, h: f64| {
        let mut p = at;
        p[k] += h;
        p
    };
    let mut grad = Vector::zeros(2);
    for k in 0..2 {
        let h = fd_step(at[k], GRAD_STEP);
        let (up, dn) = (shift(k, h), shift(k, -h));
        grad[k] = (value_at(up[0], up[1])? - value_at(dn[0], dn[1])?) / (2.0 * h);
    }
    // Second differences of values; nesting first differences would
    // square the roundoff amplification.
    let mut hess = Mat::zeros(2, 2);
    let h = [fd_step(at[0], VALUE_HESS_STEP), fd_step(at[1], VALUE_HESS_STEP)];
    let f0 = value_at(at[0], at[1])?;
    for k in 0..2 {
        let (up, dn) = (shift(k, h[k]), shift(k, -h[k]));
        hess[(k, k)] = (value_at(up[0], up[1])? - 2.0 * f0 + value_at(dn[0], dn[1])?) / (h[k] * h[k]);
    }
    let corner = |a: f64, b: f64| value_at(at[0] + a * h[0], at[1] + b * h[1]);
    let mixed = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h[0] * h[1]);
    hess[(0, 1)] = mixed;
    hess[(1, 0)] = mixed;
    check_finite_derivs(&grad, &hess)?;
    Ok(ThetaDerivs { grad, hess })
}

fn check_finite_derivs(grad: &Vector, hess: &Mat) -> Result<()> {
    if grad.iter().chain(hess.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::num("θ-derivatives are not finite (finite-difference step underflow?)"))
    }
}

/// Derivatives of the local term f_j. Only the β coordinate is non-zero:
/// f_j depends on θ through B alone and B is independent of σ.
pub fn f_theta_derivs(
    data: &SpatialDataset,
    knots: &KnotSet,
    v: &VariationalState,
    params: &ModelParams,
    jitter: f64,
    mode: DerivMode,
) -> Result<ThetaDerivs> {
    let corr = Correlation::new(params.theta.nu);
    let base = LocalStats::compute(data, knots, &corr, params.theta.beta, jitter, mode == DerivMode::Analytic)?;
    f_theta_derivs_from(data, knots, &corr, &base, v, params, jitter, mode)
}

/// As [`f_theta_derivs`], reusing statistics already computed at β.
#[allow(clippy::too_many_arguments)]
pub fn f_theta_derivs_from(
    data: &SpatialDataset,
    knots: &KnotSet,
    corr: &Correlation,
    base: &LocalStats,
    v: &VariationalState,
    params: &ModelParams,
    jitter: f64,
    mode: DerivMode,
) -> Result<ThetaDerivs> {
    let beta = params.theta.beta;
    let (gamma, delta) = (&params.gamma, params.delta);
    let (g, hbb) = match mode {
        DerivMode::Analytic => {
            let fresh;
            let stats = if base.has_deriv() {
                base
            } else {
                fresh = LocalStats::compute(data, knots, corr, beta, jitter, true)?;
                &fresh
            };
            (stats.dfj_dbeta(v, gamma, delta)?, stats.d2fj_dbeta2(v, gamma, delta)?)
        }
        DerivMode::FiniteDifference => {
            let moments = DataMoments::new(data);
            let value = |b: f64| -> Result<f64> {
                Ok(LocalStats::compute(data, knots, corr, b, jitter, false)?.fj(&moments, v, gamma, delta))
            };
            let h = fd_step(beta, GRAD_STEP);
            let g = (value(beta + h)? - value(beta - h)?) / (2.0 * h);
            let h = fd_step(beta, VALUE_HESS_STEP);
            (g, (value(beta + h)? - 2.0 * base.fj(&moments, v, gamma, delta) + value(beta - h)?) / (h * h))
        }
    };
    let mut grad = Vector::zeros(2);
    grad[BETA] = g;
    let mut hess = Mat::zeros(2, 2);
    hess[(BETA, BETA)] = hbb;
    check_finite_derivs(&grad, &hess)?;
    Ok(ThetaDerivs { grad, hess })
}

/// Gradient and Hessian of f_j + h/J in (σ, β) with (μ, Σ, γ, δ) held fixed.
pub fn elbo_theta_derivs(
    data: &SpatialDataset,
    knots: &KnotSet,
    v: &VariationalState,
    params: &ModelParams,
    n_machines: usize,
    mode: DerivMode,
) -> Result<ThetaDerivs> {
    if n_machines == 0 {
        return Err(Error::arg("the number of machines must be positive"));
    }
    let f = f_theta_derivs(data, knots, v, params, 0.0, mode)?;
    let h = h_theta_derivs(v, knots, &params.theta, 0.0, mode)?;
    Ok(f.add(&h.scaled(1.0 / n_machines as f64)))
}

/// Sums of local statistics over all machines at one θ.
#[derive(Debug, Clone)]
pub struct GlobalStats {
    pub n: f64,
    /// Σ_j B_jᵀB_j
    pub btb: Mat,
    /// Σ_j B_jᵀ(z_j - X_jγ)
    pub btr: Vector,
    /// Σ_j ‖z_j - X_jγ‖²
    pub rtr: f64,
}

impl GlobalStats {
    pub fn from_locals(stats: &[LocalStats], moments: &[DataMoments], gamma: &Vector) -> Self {
        let m = stats[0].m();
        let mut g = GlobalStats { n: 0.0, btb: Mat::zeros(m, m), btr: Vector::zeros(m), rtr: 0.0 };
        for (s, mo) in stats.iter().zip(moments) {
            g.n += mo.n as f64;
            g.btb += s.btb();
            g.btr += s.btr(gamma);
            g.rtr += mo.rss(gamma);
        }
        g
    }
}

/// A = K⁻¹ + δ Σ_j B_jᵀB_j, the precision of η given z.
pub fn posterior_precision(k_inv: &Mat, btb: &Mat, delta: f64) -> Mat {
    let mut a = k_inv + btb * delta;
    linalg::symmetrize(&mut a);
    a
}

/// Negative log-likelihood from global sums:
/// ½[N log 2π + log|C| + (z-Xγ)ᵀC⁻¹(z-Xγ)] with
/// C⁻¹ = δI - δ²BA⁻¹Bᵀ and log|C| = -N log δ + log|K| + log|A|.
pub fn woodbury_nll(g: &GlobalStats, k_inv: &Mat, k_log_det: f64, delta: f64) -> Result<f64> {
    let a = posterior_precision(k_inv, &g.btb, delta);
    let af = SpdFactor::new(&a, "posterior precision A")?;
    let log_det_c = -g.n * delta.ln() + k_log_det + af.log_det();
    let quad = delta * g.rtr - delta * delta * g.btr.dot(&af.solve_vec(&g.btr));
    Ok(0.5 * (g.n * (2.0 * PI).ln() + log_det_c + quad))
}

/// Negative log-likelihood of the pooled data under the low-rank model.
/// Costs O(N m²); never forms an N × N matrix.
pub fn nll(datasets: &[SpatialDataset], knots: &KnotSet, params: &ModelParams) -> Result<f64> {
    nll_jittered(datasets, knots, params, 0.0)
}

pub fn nll_jittered(datasets: &[SpatialDataset], knots: &KnotSet, params: &ModelParams, jitter: f64) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::arg("no data"));
    }
    let corr = Correlation::new(params.theta.nu);
    let stats: Vec<LocalStats> = datasets
        .iter()
        .map(|d| LocalStats::compute(d, knots, &corr, params.theta.beta, jitter, false))
        .collect::<Result<_>>()?;
    let moments: Vec<DataMoments> = datasets.iter().map(DataMoments::new).collect();
    let g = GlobalStats::from_locals(&stats, &moments, &params.gamma);
    let sigma = params.theta.sigma;
    woodbury_nll(&g, &stats[0].k_inv(sigma), stats[0].k_log_det(sigma), params.delta)
}

/// Exact conditional moments of η given the data: Σ* = A⁻¹, μ* = δ A⁻¹ Σ_j B_jᵀr_j.
pub fn exact_variational(g: &GlobalStats, k_inv: &Mat, delta: f64) -> Result<VariationalState> {
    let a = posterior_precision(k_inv, &g.btb, delta);
    let af = SpdFactor::new(&a, "posterior precision A")?;
    let sigma = af.inverse();
    let mu = af.solve_vec(&g.btr) * delta;
    VariationalState::new(mu, sigma)
}

/// Thresholds of the Hessian eigenvalue modification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdThresholds {
    pub eps: f64,
    pub lambda_min: f64,
}

impl MdThresholds {
    /// eps = 1e-8·(1 + max|λ|), λ_min = 1e-6·(1 + max|λ|).
    pub fn relative_to(h: &Mat) -> Self {
        let eig = linalg::sym_eigen(h);
        let scale = 1.0 + eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        MdThresholds { eps: 1e-8 * scale, lambda_min: 1e-6 * scale }
    }
}

/// The eigenvalue rule applied to one eigenvalue.
pub fn md_eigenvalue(lambda: f64, eps: f64, lambda_min: f64) -> f64 {
    if lambda.abs() < eps {
        lambda_min
    } else if lambda < 0.0 {
        -lambda
    } else {
        lambda
    }
}

/// Positive definite modification of a symmetric matrix: negative
/// eigenvalues are reflected, near-zero ones replaced by `lambda_min`.
pub fn md(h: &Mat, eps: f64, lambda_min: f64) -> Result<Mat> {
    if h.nrows() != h.ncols() {
        return Err(Error::arg("md requires a square matrix"));
    }
    if !(eps > 0.0) || !(lambda_min > 0.0) {
        return Err(Error::arg("md thresholds must be positive"));
    }
    if !linalg::all_finite(h) {
        return Err(Error::num("md received non-finite entries"));
    }
    let tol = 1e-10 * (1.0 + h.amax());
    if linalg::max_asymmetry(h) > tol {
        return Err(Error::arg("md requires a symmetric matrix"));
    }
    Ok(linalg::map_eigenvalues(h, |l| md_eigenvalue(l, eps, lambda_min)))
}

/// [`md`] with thresholds scaled to the spectrum of `h`.
pub fn md_default(h: &Mat) -> Result<Mat> {
    let t = MdThresholds::relative_to(h);
    md(h, t.eps, t.lambda_min)
}
