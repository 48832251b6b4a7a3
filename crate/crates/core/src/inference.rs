//! Prediction, asymptotic variances and confidence intervals, the
//! centralized baseline fit and the smoothness grid search.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::covkernel::{correlation_matrix, factor_knot_matrix, knot_correlation, Correlation};
use crate::dbcd::{run, RunConfig, RunOutput};
use crate::error::{Error, Result};
use crate::geo::{KnotSet, Location, SpatialDataset};
use crate::linalg::{self, Mat, SpdFactor, Vector};
use crate::network::{Mixable, Network, Topology};
use crate::objective::{nll_jittered, posterior_precision, woodbury_nll, DataMoments, GlobalStats, LocalStats, ModelParams, VariationalState};
use crate::par::Execution;

/// Gaussian predictive distribution at new locations.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pub mean: Vector,
    pub cov: Mat,
}

impl PredictiveDistribution {
    pub fn marginal_std(&self) -> Vector {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Predictive mean X^Pγ + B^Pμ and covariance B^PΣB^Pᵀ + δ⁻¹I.
pub fn predict(
    new_locs: &[Location],
    new_x: &Mat,
    knots: &KnotSet,
    params: &ModelParams,
    v: &VariationalState,
) -> Result<PredictiveDistribution> {
    predict_jittered(new_locs, new_x, knots, params, v, 0.0)
}

pub fn predict_jittered(
    new_locs: &[Location],
    new_x: &Mat,
    knots: &KnotSet,
    params: &ModelParams,
    v: &VariationalState,
    jitter: f64,
) -> Result<PredictiveDistribution> {
    let n = new_locs.len();
    let p = params.gamma.len();
    if new_x.nrows() != n || new_x.ncols() != p {
        return Err(Error::arg(format!(
            "covariates are {}×{}, expected {n}×{p}",
            new_x.nrows(),
            new_x.ncols()
        )));
    }
    if v.mu.len() != knots.len() {
        return Err(Error::arg(format!("variational state has dimension {}, knots {}", v.mu.len(), knots.len())));
    }
    let corr = Correlation::new(params.theta.nu);
    let (rk, _) = knot_correlation(knots, params.theta.beta, &corr, false);
    let rk_factor = factor_knot_matrix(&rk, jitter)?;
    let (rp, _) = correlation_matrix(new_locs, knots.locations(), params.theta.beta, &corr, false);
    let bt = rk_factor.solve(&rp.transpose());
    let b = bt.transpose();
    let mut mean = &b * &v.mu;
    if p > 0 {
        mean += new_x * &params.gamma;
    }
    let mut cov = &b * &v.sigma * &bt;
    for i in 0..n {
        cov[(i, i)] += 1.0 / params.delta;
    }
    linalg::symmetrize(&mut cov);
    Ok(PredictiveDistribution { mean, cov })
}

/// Per-observation information blocks of the estimator.
#[derive(Debug, Clone)]
pub struct AsymptoticVariances {
    /// p × p, information for γ per observation.
    pub v_gamma: Mat,
    /// Information for δ per observation.
    pub v_delta: f64,
    /// 2 × 2 over (σ, β), information per knot.
    pub v_theta: Mat,
}

/// How global sums of machine-local terms are formed.
pub enum Assembly<'a> {
    /// Plain summation, as a central server would.
    Direct,
    /// J times machine 0's value after the network's default gossip rounds.
    Consensus(&'a mut Network),
}

impl Assembly<'_> {
    fn sum<T: Mixable>(&mut self, locals: Vec<T>) -> Result<T> {
        let j = locals.len() as f64;
        let mut total = locals[0].zeros_like();
        match self {
            Assembly::Direct => {
                for v in &locals {
                    total.add_scaled(1.0, v);
                }
            }
            Assembly::Consensus(net) => {
                let mixed = net.mix(&locals)?;
                total.add_scaled(j, &mixed[0]);
            }
        }
        Ok(total)
    }
}

/// Relative step of the central differences in θ.
const THETA_FD_STEP: f64 = 1e-3;

/// Information matrices at converged parameters. Sums over machines are
/// taken with `assembly`.
pub fn estimate_variances(
    datasets: &[SpatialDataset],
    knots: &KnotSet,
    params: &ModelParams,
    jitter: f64,
    mut assembly: Assembly<'_>,
) -> Result<AsymptoticVariances> {
    if datasets.is_empty() {
        return Err(Error::arg("no data"));
    }
    if let Assembly::Consensus(net) = &assembly {
        if net.n_machines() != datasets.len() {
            return Err(Error::arg(format!("{} datasets for a {}-machine network", datasets.len(), net.n_machines())));
        }
    }
    let corr = Correlation::new(params.theta.nu);
    let (gamma, delta) = (&params.gamma, params.delta);
    let (sigma, beta) = (params.theta.sigma, params.theta.beta);
    let moments: Vec<DataMoments> = datasets.iter().map(DataMoments::new).collect();
    let stats_at = |b: f64| -> Result<Vec<LocalStats>> {
        datasets.iter().map(|d| LocalStats::compute(d, knots, &corr, b, jitter, false)).collect()
    };
    let stats = stats_at(beta)?;
    let p = gamma.len();
    let m = knots.len();

    let n = assembly.sum(moments.iter().map(|mo| mo.n as f64).collect())?;
    let btb = assembly.sum(stats.iter().map(LocalStats::btb).collect())?;
    let xtx = assembly.sum(moments.iter().map(|mo| mo.xtx.clone()).collect())?;
    let xtb = assembly.sum(stats.iter().map(LocalStats::xtb).collect())?;

    let a = posterior_precision(&stats[0].k_inv(sigma), &btb, delta);
    let a_factor = SpdFactor::new(&a, "posterior precision A")?;
    let v_gamma = if p > 0 {
        let ainv_btx = a_factor.solve(&xtb.transpose());
        let mut vg = (xtx * delta - &xtb * ainv_btx * (delta * delta)) / n;
        linalg::symmetrize(&mut vg);
        vg
    } else {
        Mat::zeros(0, 0)
    };
    // tr C⁻² with C⁻¹ = δI - δ²BA⁻¹Bᵀ
    let ainv_g = a_factor.solve(&btb);
    let tr_c2 = n * delta * delta - 2.0 * delta.powi(3) * ainv_g.trace()
        + delta.powi(4) * linalg::trace_of_product(&ainv_g, &ainv_g);
    let v_delta = tr_c2 / (2.0 * n * delta.powi(4));

    // Global nll as a function of (σ, β) at fixed (γ, δ).
    let mut globals_at = |st: &[LocalStats]| -> Result<(GlobalStats, Mat, f64)> {
        let g = GlobalStats {
            n,
            btb: assembly.sum(st.iter().map(LocalStats::btb).collect())?,
            btr: assembly.sum(st.iter().map(|s| s.btr(gamma)).collect())?,
            rtr: assembly.sum(moments.iter().map(|mo| mo.rss(gamma)).collect())?,
        };
        Ok((g, st[0].rk_inv().clone(), st[0].rk_log_det()))
    };
    let hb = THETA_FD_STEP * beta;
    let hs = THETA_FD_STEP * sigma;
    let at_beta = [globals_at(&stats_at(beta - hb)?)?, globals_at(&stats)?, globals_at(&stats_at(beta + hb)?)?];
    let value = |si: i32, bi: i32| -> Result<f64> {
        let (g, rk_inv, rk_ld) = &at_beta[(bi + 1) as usize];
        let s = sigma + f64::from(si) * hs;
        woodbury_nll(g, &(rk_inv / (s * s)), rk_ld + m as f64 * (s * s).ln(), delta)
    };
    let f0 = value(0, 0)?;
    let mut hess = Mat::zeros(2, 2);
    hess[(0, 0)] = (value(1, 0)? - 2.0 * f0 + value(-1, 0)?) / (hs * hs);
    hess[(1, 1)] = (value(0, 1)? - 2.0 * f0 + value(0, -1)?) / (hb * hb);
    let mixed = (value(1, 1)? - value(1, -1)? - value(-1, 1)? + value(-1, -1)?) / (4.0 * hs * hb);
    hess[(0, 1)] = mixed;
    hess[(1, 0)] = mixed;
    let v_theta = hess / m as f64;
    if !v_delta.is_finite() || !linalg::all_finite(&v_gamma) || !linalg::all_finite(&v_theta) {
        return Err(Error::num("variance estimates are not finite"));
    }
    Ok(AsymptoticVariances { v_gamma, v_delta, v_theta })
}

/// A two-sided interval around a point estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub point: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    fn new(point: f64, std: f64, z: f64) -> Self {
        Interval { point, std, lower: point - z * std, upper: point + z * std }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub n: usize,
    pub m: usize,
    pub gamma: Vec<Interval>,
    pub delta: Interval,
    pub sigma: Interval,
    pub beta: Interval,
}

/// The two-sided standard-normal quantile for `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::arg(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    Ok(std_normal.inverse_cdf(0.5 + 0.5 * level))
}

fn inverse_diagonal(v: &Mat, what: &str) -> Result<Vector> {
    if v.nrows() == 0 {
        return Ok(Vector::zeros(0));
    }
    let f = SpdFactor::new(v, what).map_err(|e| e.context("variance matrix is singular"))?;
    Ok(f.inverse().diagonal())
}

/// Wald intervals: half-widths z·√([V_γ⁻¹]_ii/N), z·√(1/(N v_δ)) and
/// z·√([V_θ⁻¹]_ii/m).
pub fn confidence_intervals(
    vars: &AsymptoticVariances,
    estimates: &ModelParams,
    n: usize,
    m: usize,
    level: f64,
) -> Result<ConfidenceIntervals> {
    let z = normal_quantile(level)?;
    if n == 0 || m == 0 {
        return Err(Error::arg("N and m must be positive"));
    }
    if vars.v_gamma.nrows() != estimates.gamma.len() {
        return Err(Error::arg("variance and estimate dimensions disagree"));
    }
    if !(vars.v_delta > 0.0) {
        return Err(Error::num("the δ information is not positive"));
    }
    let (nf, mf) = (n as f64, m as f64);
    let g_diag = inverse_diagonal(&vars.v_gamma, "V_γ")?;
    let t_diag = inverse_diagonal(&vars.v_theta, "V_θ")?;
    let gamma = estimates.gamma.iter().zip(g_diag.iter()).map(|(&g, &d)| Interval::new(g, (d / nf).sqrt(), z)).collect();
    Ok(ConfidenceIntervals {
        level,
        n,
        m,
        gamma,
        delta: Interval::new(estimates.delta, (1.0 / (nf * vars.v_delta)).sqrt(), z),
        sigma: Interval::new(estimates.theta.sigma, (t_diag[0] / mf).sqrt(), z),
        beta: Interval::new(estimates.theta.beta, (t_diag[1] / mf).sqrt(), z),
    })
}

impl ConfidenceIntervals {
    /// Parameter names paired with their intervals, γ first.
    pub fn named(&self) -> Vec<(String, Interval)> {
        let mut out: Vec<(String, Interval)> =
            self.gamma.iter().enumerate().map(|(i, iv)| (format!("gamma_{}", i + 1), *iv)).collect();
        out.push(("delta".into(), self.delta));
        out.push(("sigma".into(), self.sigma));
        out.push(("beta".into(), self.beta));
        out
    }

    /// Key-value report: a header with `level`, `N` and `m`, then one
    /// section per parameter with `estimate`, `std`, `lower` and `upper`.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "level = {}", self.level);
        let _ = writeln!(s, "N = {}", self.n);
        let _ = writeln!(s, "m = {}", self.m);
        for (name, iv) in self.named() {
            let _ = writeln!(s, "\n[{name}]");
            let _ = writeln!(s, "estimate = {:.16e}", iv.point);
            let _ = writeln!(s, "std = {:.16e}", iv.std);
            let _ = writeln!(s, "lower = {:.16e}", iv.lower);
            let _ = writeln!(s, "upper = {:.16e}", iv.upper);
        }
        s
    }
}

/// Outer tolerance used by [`fit_centralized`] unless the configuration
/// sets one.
pub const CENTRAL_TOL: f64 = 1e-12;
/// Smallest iteration budget of [`fit_centralized`].
pub const CENTRAL_MIN_ITERATIONS: usize = 1000;

/// The configuration [`fit_centralized`] actually runs with.
pub fn central_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        iterations: cfg.iterations.max(CENTRAL_MIN_ITERATIONS),
        outer_tol: Some(cfg.outer_tol.unwrap_or(CENTRAL_TOL)),
        ..cfg.clone()
    }
}

/// Block coordinate descent on the pooled data with a single machine, run
/// until the parameters stop moving. The estimate is `states[0].params`.
pub fn fit_centralized(data: &SpatialDataset, knots: &KnotSet, cfg: &RunConfig) -> Result<RunOutput> {
    let ccfg = central_config(cfg);
    let mut net = Network::new(Topology::complete(1)?, 1, Execution::Sequential)?;
    let out = run(std::slice::from_ref(data), knots, &mut net, &ccfg, None)?;
    if out.iterations == ccfg.iterations {
        log::warn!("centralized fit used its full budget of {} iterations", ccfg.iterations);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NuFit {
    pub params: ModelParams,
    pub nll: f64,
    pub iterations: usize,
}

/// One row of the smoothness search; failed fits keep their error text.
#[derive(Debug, Clone)]
pub struct NuCandidate {
    pub nu: f64,
    pub outcome: std::result::Result<NuFit, String>,
}

#[derive(Debug, Clone)]
pub struct NuSearch {
    pub nu_hat: f64,
    pub table: Vec<NuCandidate>,
}

/// Fits the model at each candidate ν and picks the smallest final nll.
/// Candidates are fitted independently, in parallel when available.
pub fn estimate_nu(data: &SpatialDataset, knots: &KnotSet, candidates: &[f64], cfg: &RunConfig) -> Result<NuSearch> {
    if candidates.is_empty() {
        return Err(Error::arg("no smoothness candidates"));
    }
    if let Some(bad) = candidates.iter().find(|&&nu| !(nu > 0.0 && nu.is_finite())) {
        return Err(Error::arg(format!("smoothness candidates must be positive, got {bad}")));
    }
    let table: Vec<NuCandidate> = Execution::default().map(candidates, |_, &nu| {
        let fit = || -> Result<NuFit> {
            let ncfg = RunConfig { nu, ..cfg.clone() };
            let out = fit_centralized(data, knots, &ncfg)?;
            let params = out.states[0].params.clone();
            let nll = nll_jittered(std::slice::from_ref(data), knots, &params, cfg.jitter)?;
            if !nll.is_finite() {
                return Err(Error::num("nll is not finite"));
            }
            Ok(NuFit { params, nll, iterations: out.iterations })
        };
        NuCandidate { nu, outcome: fit().map_err(|e| e.to_string()) }
    });
    let best = table
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|f| (c.nu, f.nll)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let nu_hat = match (best, candidates) {
        (Some((nu, _)), _) => nu,
        (None, [only]) => *only,
        (None, _) => {
            let reasons: Vec<String> = table.iter().map(|c| format!("ν={}: {}", c.nu, c.outcome.as_ref().err().unwrap())).collect();
            return Err(Error::num(format!("every smoothness candidate failed ({})", reasons.join("; "))));
        }
    };
    Ok(NuSearch { nu_hat, table })
}
