//! Matérn covariance, its (σ, β) derivatives, and the Gaussian predictive
//! process basis B(θ) = C(S, S*) K(θ)⁻¹ with K(θ) = C(S*, S*).
//!
//! The kernel is
//! c(d) = σ² · 2^{1-ν}/Γ(ν) · (√(2ν) d/β)^ν · K_ν(√(2ν) d/β),
//! with c(0) = σ². Orders ν ∈ {1/2, 3/2, 5/2} use the exact exponential
//! closed forms; every other order goes through [`bessel`].

pub mod bessel;
mod table;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geo::{KnotSet, Location};
use crate::linalg::{Mat, SpdFactor};

/// Below this scaled distance the correlation is 1 to double precision.
const TINY_SCALED_DIST: f64 = 1e-60;
/// Condition number beyond which K(θ) is reported as numerically singular.
pub const MAX_KNOT_CONDITION: f64 = 1e14;

/// Kernel parameters θ = (σ, β, ν).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub sigma: f64,
    pub beta: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, beta: f64, nu: f64) -> Result<Self> {
        let p = MaternParams { sigma, beta, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("beta", self.beta), ("nu", self.nu)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("Matérn {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_sigma_beta(&self, sigma: f64, beta: f64) -> Self {
        MaternParams { sigma, beta, nu: self.nu }
    }
}

#[derive(Debug, Clone)]
enum Form {
    Half,
    ThreeHalves,
    FiveHalves,
    General(Option<Arc<table::MaternTable>>),
}

/// Unit-variance Matérn correlation ρ(d; β) for a fixed smoothness.
#[derive(Debug, Clone)]
pub struct Correlation {
    nu: f64,
    scale: f64,
    log_norm: f64,
    form: Form,
}

impl Correlation {
    /// General orders read mid-range distances from a shared interpolation
    /// table (relative error around 1e-12).
    pub fn new(nu: f64) -> Self {
        Self::build(nu, true)
    }

    /// Evaluates every general-order entry from Bessel functions directly.
    pub fn direct(nu: f64) -> Self {
        Self::build(nu, false)
    }

    fn build(nu: f64, tabulate: bool) -> Self {
        let form = if nu == 0.5 {
            Form::Half
        } else if nu == 1.5 {
            Form::ThreeHalves
        } else if nu == 2.5 {
            Form::FiveHalves
        } else {
            Form::General(tabulate.then(|| table::table_for(nu)))
        };
        let log_norm = (1.0 - nu) * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(nu);
        Correlation { nu, scale: (2.0 * nu).sqrt(), log_norm, form }
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn value(&self, d: f64, beta: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        let x = self.scale * d / beta;
        match self.form {
            Form::Half => (-x).exp(),
            Form::ThreeHalves => (1.0 + x) * (-x).exp(),
            Form::FiveHalves => (1.0 + x + x * x / 3.0) * (-x).exp(),
            Form::General(ref tab) => {
                if x < TINY_SCALED_DIST {
                    return 1.0;
                }
                if let Some(t) = tab.as_deref().filter(|_| (table::X_LO..=table::X_HI).contains(&x)) {
                    return (self.log_norm + t.eval(x).0 - x).exp();
                }
                let ks = bessel::bessel_k_scaled(self.nu, x).expect("x > 0 checked");
                (self.log_norm + self.nu * x.ln() + ks.ln() - x).exp()
            }
        }
    }

    /// (ρ, ∂ρ/∂β). Uses d/dx[x^ν K_ν(x)] = -x^ν K_{ν-1}(x).
    pub fn value_and_dbeta(&self, d: f64, beta: f64) -> (f64, f64) {
        if d == 0.0 {
            return (1.0, 0.0);
        }
        let x = self.scale * d / beta;
        match self.form {
            Form::Half => {
                let e = (-x).exp();
                (e, x * e / beta)
            }
            Form::ThreeHalves => {
                let e = (-x).exp();
                ((1.0 + x) * e, x * x * e / beta)
            }
            Form::FiveHalves => {
                let e = (-x).exp();
                ((1.0 + x + x * x / 3.0) * e, x * x * (1.0 + x) * e / (3.0 * beta))
            }
            Form::General(ref tab) => {
                if x < TINY_SCALED_DIST {
                    return (1.0, 0.0);
                }
                if let Some(t) = tab.as_deref().filter(|_| (table::X_LO..=table::X_HI).contains(&x)) {
                    let (q, r) = t.eval(x);
                    let rho = (self.log_norm + q - x).exp();
                    return (rho, rho * x * r / beta);
                }
                let (k_lower, k_nu) = bessel::bessel_k_adjacent_scaled(self.nu, x).expect("x > 0 checked");
                let lx = x.ln();
                let rho = (self.log_norm + self.nu * lx + k_nu.ln() - x).exp();
                let drho = (self.log_norm + (self.nu + 1.0) * lx + k_lower.ln() - x).exp() / beta;
                (rho, drho)
            }
        }
    }
}

impl Correlation {
    /// (ρ, ∂ρ/∂β, ∂²ρ/∂β²). With x = √(2ν)d/β and r = K_{ν-1}(x)/K_ν(x),
    /// ∂ρ/∂β = ρxr/β and ∂²ρ/∂β² = ρx(x - (2ν+1)r)/β².
    pub fn value_and_dbeta2(&self, d: f64, beta: f64) -> (f64, f64, f64) {
        if d == 0.0 {
            return (1.0, 0.0, 0.0);
        }
        let x = self.scale * d / beta;
        let (rho, r) = match self.form {
            Form::Half => ((-x).exp(), 1.0),
            Form::ThreeHalves => ((1.0 + x) * (-x).exp(), x / (1.0 + x)),
            Form::FiveHalves => {
                let poly = x * x + 3.0 * x + 3.0;
                (poly / 3.0 * (-x).exp(), x * (x + 1.0) / poly)
            }
            Form::General(ref tab) => {
                if x < TINY_SCALED_DIST {
                    return (1.0, 0.0, 0.0);
                }
                if let Some(t) = tab.as_deref().filter(|_| (table::X_LO..=table::X_HI).contains(&x)) {
                    let (q, r) = t.eval(x);
                    ((self.log_norm + q - x).exp(), r)
                } else {
                    let (k_lower, k_nu) = bessel::bessel_k_adjacent_scaled(self.nu, x).expect("x > 0 checked");
                    ((self.log_norm + self.nu * x.ln() + k_nu.ln() - x).exp(), k_lower / k_nu)
                }
            }
        };
        let xr = x * r;
        (rho, rho * xr / beta, rho * x * (x - (2.0 * self.nu + 1.0) * r) / (beta * beta))
    }
}

/// Correlation matrix with its first two β-derivatives.
pub fn correlation_matrix_dbeta2(rows: &[Location], cols: &[Location], beta: f64, corr: &Correlation) -> [Mat; 3] {
    let (n, m) = (rows.len(), cols.len());
    let mut out = [Mat::zeros(n, m), Mat::zeros(n, m), Mat::zeros(n, m)];
    for j in 0..m {
        for i in 0..n {
            let (v, d1, d2) = corr.value_and_dbeta2(rows[i].dist(&cols[j]), beta);
            out[0][(i, j)] = v;
            out[1][(i, j)] = d1;
            out[2][(i, j)] = d2;
        }
    }
    out
}

/// Knot correlation matrix with its first two β-derivatives.
pub fn knot_correlation_dbeta2(knots: &KnotSet, beta: f64, corr: &Correlation) -> [Mat; 3] {
    let k = knots.locations();
    correlation_matrix_dbeta2(k, k, beta, corr)
}

/// Matérn covariance at distance `d`.
pub fn matern_cov(d: f64, params: &MaternParams) -> f64 {
    params.sigma * params.sigma * Correlation::new(params.nu).value(d, params.beta)
}

/// (∂c/∂σ, ∂c/∂β) at distance `d`.
pub fn matern_cov_grad(d: f64, params: &MaternParams) -> (f64, f64) {
    let (rho, drho) = Correlation::new(params.nu).value_and_dbeta(d, params.beta);
    let s = params.sigma;
    (2.0 * s * rho, s * s * drho)
}

/// Correlation matrix between two location sets, with the β-derivative
/// when requested.
pub fn correlation_matrix(
    rows: &[Location],
    cols: &[Location],
    beta: f64,
    corr: &Correlation,
    with_dbeta: bool,
) -> (Mat, Option<Mat>) {
    let (n, m) = (rows.len(), cols.len());
    if !with_dbeta {
        return (Mat::from_fn(n, m, |i, j| corr.value(rows[i].dist(&cols[j]), beta)), None);
    }
    let mut r = Mat::zeros(n, m);
    let mut dr = Mat::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let (v, dv) = corr.value_and_dbeta(rows[i].dist(&cols[j]), beta);
            r[(i, j)] = v;
            dr[(i, j)] = dv;
        }
    }
    (r, Some(dr))
}

/// Symmetric knot correlation matrix (β-derivative optional).
pub fn knot_correlation(knots: &KnotSet, beta: f64, corr: &Correlation, with_dbeta: bool) -> (Mat, Option<Mat>) {
    let k = knots.locations();
    let m = k.len();
    let mut r = Mat::identity(m, m);
    let mut dr = with_dbeta.then(|| Mat::zeros(m, m));
    for j in 0..m {
        for i in (j + 1)..m {
            let d = k[i].dist(&k[j]);
            let (v, dv) = if with_dbeta { corr.value_and_dbeta(d, beta) } else { (corr.value(d, beta), 0.0) };
            r[(i, j)] = v;
            r[(j, i)] = v;
            if let Some(dr) = dr.as_mut() {
                dr[(i, j)] = dv;
                dr[(j, i)] = dv;
            }
        }
    }
    (r, dr)
}

/// Factors a knot correlation matrix (plus optional diagonal jitter),
/// rejecting numerically singular layouts.
pub fn factor_knot_matrix(rk: &Mat, jitter: f64) -> Result<SpdFactor> {
    let mut a = rk.clone();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    let f = SpdFactor::new(&a, "knot covariance K(θ)")
        .map_err(|e| e.context("consider a positive jitter on K(θ)"))?;
    let cond = f.condition_estimate();
    if cond > MAX_KNOT_CONDITION {
        return Err(Error::num(format!(
            "knot covariance K(θ) is numerically singular (condition estimate {cond:.3e}); consider a positive jitter"
        )));
    }
    Ok(f)
}

/// Basis and knot covariance at one parameter value. Derivative lists are
/// ordered (σ, β).
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    pub b: Mat,
    pub k: Mat,
    pub db: Option<Vec<Mat>>,
    pub dk: Option<Vec<Mat>>,
}

pub fn build_basis(locs: &[Location], knots: &KnotSet, params: &MaternParams, with_derivatives: bool) -> Result<BasisMatrices> {
    build_basis_jittered(locs, knots, params, with_derivatives, 0.0)
}

/// Like [`build_basis`] with `jitter·σ²` added to the diagonal of K(θ).
pub fn build_basis_jittered(
    locs: &[Location],
    knots: &KnotSet,
    params: &MaternParams,
    with_derivatives: bool,
    jitter: f64,
) -> Result<BasisMatrices> {
    params.validate()?;
    let corr = Correlation::new(params.nu);
    let s2 = params.sigma * params.sigma;
    let (rk, drk) = knot_correlation(knots, params.beta, &corr, with_derivatives);
    let factor = factor_knot_matrix(&rk, jitter)?;
    let (r, dr) = correlation_matrix(locs, knots.locations(), params.beta, &corr, with_derivatives);

    let mut k = rk * s2;
    for i in 0..k.nrows() {
        k[(i, i)] += jitter * s2;
    }
    let c = &r * s2;
    // B = C K⁻¹ = (K⁻¹ Cᵀ)ᵀ; K = σ²·(R_K + jitter·I) shares R_K's factor.
    let b = factor.solve(&c.transpose()).transpose() / s2;

    if !with_derivatives {
        return Ok(BasisMatrices { b, k, db: None, dk: None });
    }
    let drk = drk.expect("requested");
    let dr = dr.expect("requested");
    let dk_sigma = &k * (2.0 / params.sigma);
    let dk_beta = &drk * s2;
    let dc_sigma = &c * (2.0 / params.sigma);
    let dc_beta = &dr * s2;
    // ∂B = [∂C - B ∂K] K⁻¹.
    let dbasis = |dc: &Mat, dk: &Mat| -> Mat {
        let lhs = dc - &b * dk;
        factor.solve(&lhs.transpose()).transpose() / s2
    };
    let db = vec![dbasis(&dc_sigma, &dk_sigma), dbasis(&dc_beta, &dk_beta)];
    Ok(BasisMatrices { b, k, db: Some(db), dk: Some(vec![dk_sigma, dk_beta]) })
}

/// Distance at which the correlation drops to 0.05.
pub fn effective_range(params: &MaternParams) -> f64 {
    const LEVEL: f64 = 0.05;
    let corr = Correlation::new(params.nu);
    let mut lo = 0.0;
    let mut hi = params.beta;
    while corr.value(hi, params.beta) > LEVEL {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if corr.value(mid, params.beta) > LEVEL {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}
