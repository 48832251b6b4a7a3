//! Decentralized block coordinate descent.
//!
//! Every machine holds its own copy of all parameters. One outer iteration
//! runs four block updates in order: the variational moments (μ, Σ), the
//! regression coefficients γ, the nugget precision δ, and a few Newton steps
//! on θ = (σ, β). Global sums over machines are never formed; each is
//! replaced by an accumulator that neighbours refresh by gossip on the
//! [`Network`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::covkernel::{Correlation, MaternParams};
use crate::error::{Error, Result};
use crate::geo::{KnotSet, SpatialDataset};
use crate::linalg::{self, Mat, SpdFactor, Vector};
use crate::network::{ConsensusAccumulator, Network, Topology};
use crate::objective::{
    self, exact_variational, f_theta_derivs_from, h_theta_derivs, kl_h_stats, DataMoments, DerivMode, GlobalStats,
    LocalStats, ModelParams, VariationalState,
};

/// Step-size control for the θ Newton steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    /// Halvings of α tried before the step is abandoned.
    pub max_halvings: usize,
    /// Box for σ and β.
    pub lower: f64,
    pub upper: f64,
    /// With more than one machine a step may move each of σ, β by at most
    /// this fraction of its current value.
    pub max_relative_step: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule { max_halvings: 20, lower: 1e-4, upper: 1e4, max_relative_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Outer iterations T.
    pub iterations: usize,
    /// Gossip rounds K per consensus step.
    pub rounds: usize,
    /// Maximum Newton steps S per outer iteration.
    pub newton_steps: usize,
    pub newton_tol: f64,
    pub step: StepRule,
    /// md thresholds relative to 1 + max|λ(H)|.
    pub md_eps_rel: f64,
    pub md_lambda_min_rel: f64,
    pub seed: u64,
    /// Fixed smoothness ν.
    pub nu: f64,
    /// Diagonal jitter added to the knot correlation matrix.
    pub jitter: f64,
    /// Stop once no parameter on any machine moves by more than this
    /// relative amount in one outer iteration.
    pub outer_tol: Option<f64>,
    /// Budget and tolerance of the per-machine warm-start fits.
    pub init_iterations: usize,
    pub init_tol: f64,
    /// Starting (σ, β) for the warm-start fits; derived from the data when
    /// absent.
    pub initial_theta: Option<(f64, f64)>,
    pub deriv_mode: DerivMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 100,
            rounds: 6,
            newton_steps: 5,
            newton_tol: 1e-8,
            step: StepRule::default(),
            md_eps_rel: 1e-8,
            md_lambda_min_rel: 1e-6,
            seed: 0,
            nu: 0.5,
            jitter: 0.0,
            outer_tol: None,
            init_iterations: 30,
            init_tol: 1e-5,
            initial_theta: None,
            deriv_mode: DerivMode::Analytic,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rounds == 0 || self.newton_steps == 0 {
            return Err(Error::arg("T, K and S must all be at least 1"));
        }
        if !(self.nu > 0.0) {
            return Err(Error::arg(format!("smoothness must be positive, got {}", self.nu)));
        }
        let s = &self.step;
        if !(s.lower > 0.0 && s.lower < s.upper) || !(s.max_relative_step > 0.0) {
            return Err(Error::arg("invalid step rule"));
        }
        if !(self.md_eps_rel > 0.0 && self.md_lambda_min_rel > 0.0) {
            return Err(Error::arg("md thresholds must be positive"));
        }
        if self.jitter < 0.0 {
            return Err(Error::arg("jitter must be non-negative"));
        }
        Ok(())
    }
}

/// One machine's data, estimates and cached projections.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub data: SpatialDataset,
    pub params: ModelParams,
    pub v: VariationalState,
    /// Set when the warm-start fit failed and a moment-based start was used.
    pub init_fallback: bool,
    moments: DataMoments,
    stats: Option<LocalStats>,
}

impl MachineState {
    pub fn new(data: SpatialDataset, params: ModelParams, v: VariationalState) -> Result<Self> {
        if params.gamma.len() != data.n_covariates() {
            return Err(Error::arg(format!(
                "{} coefficients for {} covariates",
                params.gamma.len(),
                data.n_covariates()
            )));
        }
        let moments = DataMoments::new(&data);
        Ok(MachineState { data, params, v, init_fallback: false, moments, stats: None })
    }

    pub fn moments(&self) -> &DataMoments {
        &self.moments
    }

    /// This machine's share f_j + h/J of the negative ELBO.
    pub fn surrogate(&mut self, knots: &KnotSet, cfg: &RunConfig, n_machines: usize) -> Result<f64> {
        let s = cached_stats(&mut self.stats, &self.data, &self.params.theta, knots, cfg, false)?;
        let (p, v) = (&self.params, &self.v);
        Ok(s.fj(&self.moments, v, &p.gamma, p.delta) + kl_h_stats(v, s, p.theta.sigma)? / n_machines as f64)
    }
}

/// Projections at the current β, recomputed when β has moved.
fn cached_stats<'a>(
    cache: &'a mut Option<LocalStats>,
    data: &SpatialDataset,
    theta: &MaternParams,
    knots: &KnotSet,
    cfg: &RunConfig,
    with_deriv: bool,
) -> Result<&'a LocalStats> {
    let stale = match cache.as_ref() {
        Some(s) => s.beta != theta.beta || (with_deriv && !s.has_deriv()),
        None => true,
    };
    if stale {
        let corr = Correlation::new(theta.nu);
        *cache = Some(LocalStats::compute(data, knots, &corr, theta.beta, cfg.jitter, with_deriv)?);
    }
    Ok(cache.as_ref().expect("just filled"))
}

/// Per-iteration record of every machine's estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    /// `snapshots[t][j]` holds machine j's parameters after t iterations.
    pub snapshots: Vec<Vec<ModelParams>>,
    pub log_rel_err: Vec<Option<f64>>,
    /// `stalls[t][j]`: some Newton step of machine j found no acceptable α.
    pub stalls: Vec<Vec<bool>>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn final_log_rel_err(&self) -> Option<f64> {
        self.log_rel_err.last().copied().flatten()
    }

    /// CSV with header `iter,machine,gamma_1..gamma_p,delta,sigma,beta,log_rel_err,stall_flag`.
    pub fn to_csv(&self) -> String {
        let p = self.snapshots.first().and_then(|s| s.first()).map_or(0, |m| m.gamma.len());
        let mut out = String::from("iter,machine");
        for i in 1..=p {
            let _ = write!(out, ",gamma_{i}");
        }
        out.push_str(",delta,sigma,beta,log_rel_err,stall_flag\n");
        for (t, snap) in self.snapshots.iter().enumerate() {
            let err = self.log_rel_err.get(t).copied().flatten();
            for (j, m) in snap.iter().enumerate() {
                let _ = write!(out, "{t},{j}");
                for g in m.gamma.iter() {
                    let _ = write!(out, ",{g:.16e}");
                }
                let _ = write!(out, ",{:.16e},{:.16e},{:.16e}", m.delta, m.theta.sigma, m.theta.beta);
                match err {
                    Some(e) => {
                        let _ = write!(out, ",{e:.16e}");
                    }
                    None => out.push_str(",nan"),
                }
                let stall = self.stalls.get(t).and_then(|s| s.get(j)).copied().unwrap_or(false);
                let _ = writeln!(out, ",{}", u8::from(stall));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

/// log₁₀ max_j [‖(γ_j - γ̂)/γ*‖₂ + |(δ_j - δ̂)/δ*| + |(σ_j - σ̂)/σ*| + |(β_j - β̂)/β*|]
/// with `scale` holding the starred values. Exact agreement maps to -16.
pub fn log_relative_error(states: &[ModelParams], reference: &ModelParams, scale: &ModelParams) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::arg("no machine states"));
    }
    if scale.gamma.len() != reference.gamma.len() {
        return Err(Error::arg("reference and scale disagree in the number of coefficients"));
    }
    let zero = scale.gamma.iter().any(|g| *g == 0.0) || scale.delta == 0.0 || scale.theta.sigma == 0.0 || scale.theta.beta == 0.0;
    if zero {
        return Err(Error::arg("relative error is undefined for a zero scale component"));
    }
    let mut worst = 0.0f64;
    for s in states {
        if s.gamma.len() != reference.gamma.len() {
            return Err(Error::arg("state and reference disagree in the number of coefficients"));
        }
        let g: f64 = s
            .gamma
            .iter()
            .zip(reference.gamma.iter())
            .zip(scale.gamma.iter())
            .map(|((a, b), c)| ((a - b) / c).powi(2))
            .sum::<f64>()
            .sqrt();
        let e = g
            + ((s.delta - reference.delta) / scale.delta).abs()
            + ((s.theta.sigma - reference.theta.sigma) / scale.theta.sigma).abs()
            + ((s.theta.beta - reference.theta.beta) / scale.theta.beta).abs();
        worst = worst.max(e);
    }
    Ok(if worst > 0.0 { worst.log10().max(-16.0) } else { -16.0 })
}

fn collect_machines<T>(results: Vec<Result<T>>, what: &str) -> Result<Vec<T>> {
    results
        .into_iter()
        .enumerate()
        .map(|(j, r)| r.map_err(|e| e.context(format!("{what}, machine {j}"))))
        .collect()
}

/// Moment-based starting point: OLS γ, residual variance s² split evenly
/// between the spatial and nugget parts, and β a tenth of the knot extent.
pub fn moment_start(data: &SpatialDataset, knots: &KnotSet, cfg: &RunConfig) -> Result<ModelParams> {
    let mo = DataMoments::new(data);
    let p = data.n_covariates();
    let gamma = if p == 0 {
        Vector::zeros(0)
    } else {
        SpdFactor::new(&mo.xtx, "XᵀX")
            .map_err(|e| e.context("covariates are collinear"))?
            .solve_vec(&mo.xtz)
    };
    let dof = if data.len() > p { data.len() - p } else { data.len() };
    let s2 = (mo.rss(&gamma) / dof as f64).max(1e-12);
    let (sigma, beta) = cfg.initial_theta.unwrap_or_else(|| ((s2 / 2.0).sqrt(), 0.1 * knot_extent(knots)));
    ModelParams::new(gamma, 2.0 / s2, MaternParams::new(sigma, beta, cfg.nu)?)
}

fn knot_extent(knots: &KnotSet) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for k in knots.locations() {
        for d in 0..2 {
            lo[d] = lo[d].min(k.coords[d]);
            hi[d] = hi[d].max(k.coords[d]);
        }
    }
    let e = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

/// The exact conditional law of the knot values given this machine's data
/// alone, at `params`.
pub fn local_posterior(data: &SpatialDataset, knots: &KnotSet, params: &ModelParams, jitter: f64) -> Result<VariationalState> {
    let corr = Correlation::new(params.theta.nu);
    let stats = LocalStats::compute(data, knots, &corr, params.theta.beta, jitter, false)?;
    let mo = DataMoments::new(data);
    let g = GlobalStats::from_locals(std::slice::from_ref(&stats), std::slice::from_ref(&mo), &params.gamma);
    exact_variational(&g, &stats.k_inv(params.theta.sigma), params.delta)
}

fn start_state(data: &SpatialDataset, knots: &KnotSet, params: ModelParams, cfg: &RunConfig) -> Result<MachineState> {
    let v = local_posterior(data, knots, &params, cfg.jitter)?;
    MachineState::new(data.clone(), params, v)
}

/// Loose single-machine fit used as a warm start.
fn local_fit(data: &SpatialDataset, knots: &KnotSet, cfg: &RunConfig, exec: crate::par::Execution) -> Result<MachineState> {
    let start = moment_start(data, knots, cfg)?;
    let state = start_state(data, knots, start, cfg)?;
    let loose = RunConfig { iterations: cfg.init_iterations.max(1), outer_tol: Some(cfg.init_tol), ..cfg.clone() };
    let mut net = Network::new(Topology::complete(1)?, loose.rounds, exec)?;
    let out = run_from(vec![state], knots, &mut net, &loose, None)?;
    let fitted = out.states.into_iter().next().expect("one machine");
    if !fitted.params.is_finite() {
        return Err(Error::num("warm-start fit produced non-finite parameters"));
    }
    Ok(fitted)
}

/// Warm start: every machine fits its own data loosely, then the parameter
/// estimates are averaged with K gossip rounds. A machine whose local fit
/// fails starts from its moment-based estimate and is flagged.
pub fn init_local(datasets: &[SpatialDataset], knots: &KnotSet, net: &mut Network, cfg: &RunConfig) -> Result<Vec<MachineState>> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::arg("at least one machine is required"));
    }
    if datasets.len() != net.n_machines() {
        return Err(Error::arg(format!("{} datasets for a {}-machine network", datasets.len(), net.n_machines())));
    }
    let exec = net.execution();
    let fitted = collect_machines(
        exec.map(datasets, |_, d| match local_fit(d, knots, cfg, exec) {
            Ok(s) => Ok(s),
            Err(e) => {
                log::warn!("local warm-start fit failed ({e}); using the moment-based start");
                let mut s = start_state(d, knots, moment_start(d, knots, cfg)?, cfg)?;
                s.init_fallback = true;
                Ok(s)
            }
        }),
        "warm start",
    )?;
    let gammas: Vec<Vector> = fitted.iter().map(|s| s.params.gamma.clone()).collect();
    let scalars: Vec<Vector> = fitted
        .iter()
        .map(|s| Vector::from_vec(vec![s.params.delta, s.params.theta.sigma, s.params.theta.beta]))
        .collect();
    let gammas = net.mix(&gammas)?;
    let scalars = net.mix(&scalars)?;
    fitted
        .into_iter()
        .zip(gammas.into_iter().zip(scalars))
        .map(|(mut s, (g, sc))| {
            s.params = ModelParams::new(g, sc[0], MaternParams::new(sc[1], sc[2], cfg.nu)?)?;
            s.stats = None;
            Ok(s)
        })
        .collect()
}

struct Accumulators {
    y_sigma: ConsensusAccumulator<Mat>,
    y_mu: ConsensusAccumulator<Vector>,
    y_x: Vec<Mat>,
    y_gamma: ConsensusAccumulator<Vector>,
    y_delta: ConsensusAccumulator<f64>,
    y_n: Vec<f64>,
    y_hf: ConsensusAccumulator<Mat>,
    y_gf: ConsensusAccumulator<Vector>,
}

/// Contributions of one machine to every dynamic accumulator at its
/// current state.
struct Seed {
    btb: Mat,
    btr: Vector,
    gamma_rhs: Vector,
    l: f64,
    hf: Mat,
    gf: Vector,
}

fn seed_contribution(m: &mut MachineState, knots: &KnotSet, cfg: &RunConfig) -> Result<Seed> {
    let MachineState { data, params, v, moments, stats, .. } = m;
    let corr = Correlation::new(params.theta.nu);
    let s = cached_stats(stats, data, &params.theta, knots, cfg, cfg.deriv_mode == DerivMode::Analytic)?;
    let fd = f_theta_derivs_from(data, knots, &corr, s, v, params, cfg.jitter, cfg.deriv_mode)?;
    Ok(Seed {
        btb: s.btb(),
        btr: s.btr(&params.gamma),
        gamma_rhs: gamma_contribution(moments, s, &v.mu),
        l: s.l_term(moments, v, &params.gamma),
        hf: fd.hess,
        gf: fd.grad,
    })
}

fn gamma_contribution(mo: &DataMoments, s: &LocalStats, mu: &Vector) -> Vector {
    if mo.xtz.is_empty() {
        Vector::zeros(0)
    } else {
        &mo.xtz - s.xtb() * mu
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub states: Vec<MachineState>,
    pub trace: ConvergenceTrace,
    pub iterations: usize,
    pub comm: crate::network::CommStats,
}

impl RunOutput {
    pub fn params(&self) -> Vec<ModelParams> {
        self.states.iter().map(|s| s.params.clone()).collect()
    }
}

/// A reference estimate for the trace's relative error, with the values
/// used to scale each component.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub estimate: &'a ModelParams,
    pub scale: &'a ModelParams,
}

/// Warm start followed by T outer iterations.
pub fn run(
    datasets: &[SpatialDataset],
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
    reference: Option<Reference<'_>>,
) -> Result<RunOutput> {
    let states = init_local(datasets, knots, net, cfg)?;
    run_from(states, knots, net, cfg, reference)
}

/// T outer iterations from given machine states.
pub fn run_from(
    mut machines: Vec<MachineState>,
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
    reference: Option<Reference<'_>>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n_machines = machines.len();
    if n_machines == 0 || n_machines != net.n_machines() {
        return Err(Error::arg(format!("{n_machines} machine states for a {}-machine network", net.n_machines())));
    }
    let exec = net.execution();
    let seeds = collect_machines(exec.map_mut(&mut machines, |_, m| seed_contribution(m, knots, cfg)), "seeding accumulators")?;
    let mut acc = Accumulators {
        y_sigma: ConsensusAccumulator::new(seeds.iter().map(|s| s.btb.clone()).collect())?,
        y_mu: ConsensusAccumulator::new(seeds.iter().map(|s| s.btr.clone()).collect())?,
        y_x: machines.iter().map(|m| m.moments.xtx.clone()).collect(),
        y_gamma: ConsensusAccumulator::new(seeds.iter().map(|s| s.gamma_rhs.clone()).collect())?,
        y_delta: ConsensusAccumulator::new(seeds.iter().map(|s| s.l).collect())?,
        y_n: machines.iter().map(|m| m.moments.n as f64).collect(),
        y_hf: ConsensusAccumulator::new(seeds.iter().map(|s| s.hf.clone()).collect())?,
        y_gf: ConsensusAccumulator::new(seeds.iter().map(|s| s.gf.clone()).collect())?,
    };
    drop(seeds);

    let mut trace = ConvergenceTrace::default();
    let record = |trace: &mut ConvergenceTrace, machines: &[MachineState], stalls: Vec<bool>| -> Result<()> {
        let snap: Vec<ModelParams> = machines.iter().map(|m| m.params.clone()).collect();
        let err = match reference {
            Some(r) => Some(log_relative_error(&snap, r.estimate, r.scale)?),
            None => None,
        };
        trace.snapshots.push(snap);
        trace.log_rel_err.push(err);
        trace.stalls.push(stalls);
        Ok(())
    };
    record(&mut trace, &machines, vec![false; n_machines])?;

    let mut done = 0;
    for t in 0..cfg.iterations {
        let before: Vec<ModelParams> = machines.iter().map(|m| m.params.clone()).collect();
        let ctx = |e: Error| e.context(format!("iteration {}", t + 1));
        update_mu_sigma(&mut machines, &mut acc, knots, net, cfg).map_err(ctx)?;
        update_gamma(&mut machines, &mut acc, knots, net, cfg).map_err(ctx)?;
        update_delta(&mut machines, &mut acc, knots, net, cfg).map_err(ctx)?;
        let stalls = update_theta(&mut machines, &mut acc, knots, net, cfg).map_err(ctx)?;
        record(&mut trace, &machines, stalls)?;
        done = t + 1;
        if let Some(tol) = cfg.outer_tol {
            if max_relative_change(&before, &machines) < tol {
                break;
            }
        }
    }
    Ok(RunOutput { states: machines, trace, iterations: done, comm: net.stats() })
}

fn max_relative_change(before: &[ModelParams], after: &[MachineState]) -> f64 {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
    before
        .iter()
        .zip(after)
        .map(|(b, a)| {
            let a = &a.params;
            let g = a.gamma.iter().zip(b.gamma.iter()).fold(0.0f64, |m, (x, y)| m.max(rel(*x, *y)));
            g.max(rel(a.delta, b.delta)).max(rel(a.theta.sigma, b.theta.sigma)).max(rel(a.theta.beta, b.theta.beta))
        })
        .fold(0.0, f64::max)
}

/// Step 1: (μ, Σ) from the tracked averages of BᵀB and Bᵀ(z - Xγ).
fn update_mu_sigma(
    machines: &mut [MachineState],
    acc: &mut Accumulators,
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
) -> Result<()> {
    let exec = net.execution();
    let contribs = collect_machines(
        exec.map_mut(machines, |_, m| {
            let s = cached_stats(&mut m.stats, &m.data, &m.params.theta, knots, cfg, cfg.deriv_mode == DerivMode::Analytic)?;
            Ok((s.btb(), s.btr(&m.params.gamma), s.k_inv(m.params.theta.sigma)))
        }),
        "basis projections",
    )?;
    let mut btb = Vec::with_capacity(contribs.len());
    let mut btr = Vec::with_capacity(contribs.len());
    let mut kinv = Vec::with_capacity(contribs.len());
    for (a, b, c) in contribs {
        btb.push(a);
        btr.push(b);
        kinv.push(c);
    }
    net.track(&mut acc.y_sigma, btb)?;
    net.track(&mut acc.y_mu, btr)?;
    let mixed_kinv = net.mix_one(&kinv)?;
    let jf = machines.len() as f64;
    let (ys, ym) = (acc.y_sigma.values(), acc.y_mu.values());
    collect_machines(
        exec.map_mut(machines, |j, m| {
            let data_prec = linalg::clip_psd(&ys[j]) * (m.params.delta * jf);
            let sig = SpdFactor::new(&(&data_prec + &kinv[j]), "Σ-update system")?.inverse();
            let mu_sys = SpdFactor::new(&(&data_prec + &mixed_kinv[j]), "μ-update system")?;
            let mu = mu_sys.solve_vec(&(&ym[j] * (jf * m.params.delta)));
            m.v = VariationalState::new(mu, sig)?;
            Ok(())
        }),
        "(μ, Σ) update",
    )?;
    Ok(())
}

/// Step 2: γ from the averaged normal equations.
fn update_gamma(
    machines: &mut [MachineState],
    acc: &mut Accumulators,
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
) -> Result<()> {
    if machines[0].data.n_covariates() == 0 {
        return Ok(());
    }
    let exec = net.execution();
    acc.y_x = net.mix(&acc.y_x)?;
    let rhs = collect_machines(
        exec.map_mut(machines, |_, m| {
            let s = cached_stats(&mut m.stats, &m.data, &m.params.theta, knots, cfg, false)?;
            Ok(gamma_contribution(&m.moments, s, &m.v.mu))
        }),
        "γ contribution",
    )?;
    net.track(&mut acc.y_gamma, rhs)?;
    let (yx, yg) = (&acc.y_x, acc.y_gamma.values());
    collect_machines(
        exec.map_mut(machines, |j, m| {
            let f = SpdFactor::new(&yx[j], "averaged XᵀX").map_err(|e| e.context("covariates may be collinear"))?;
            m.params.gamma = f.solve_vec(&yg[j]);
            Ok(())
        }),
        "γ update",
    )?;
    Ok(())
}

/// Step 3: δ = (average n) / (average residual functional).
fn update_delta(
    machines: &mut [MachineState],
    acc: &mut Accumulators,
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
) -> Result<()> {
    let exec = net.execution();
    let l = collect_machines(
        exec.map_mut(machines, |_, m| {
            let s = cached_stats(&mut m.stats, &m.data, &m.params.theta, knots, cfg, false)?;
            Ok(s.l_term(&m.moments, &m.v, &m.params.gamma))
        }),
        "δ contribution",
    )?;
    net.track(&mut acc.y_delta, l)?;
    acc.y_n = net.mix(&acc.y_n)?;
    for (j, m) in machines.iter_mut().enumerate() {
        let yd = acc.y_delta.values()[j];
        if !(yd > 0.0) || !yd.is_finite() {
            return Err(Error::num(format!("tracked residual average {yd} is not positive on machine {j}")));
        }
        m.params.delta = acc.y_n[j] / yd;
    }
    Ok(())
}

fn in_box(theta: [f64; 2], rule: &StepRule) -> bool {
    theta.iter().all(|v| *v >= rule.lower && *v <= rule.upper)
}

/// Step 4: up to S damped Newton steps on (σ, β). Returns per-machine stall
/// flags.
fn update_theta(
    machines: &mut [MachineState],
    acc: &mut Accumulators,
    knots: &KnotSet,
    net: &mut Network,
    cfg: &RunConfig,
) -> Result<Vec<bool>> {
    let exec = net.execution();
    let n_machines = machines.len();
    let jf = n_machines as f64;
    let mut stalls = vec![false; n_machines];
    for _ in 0..cfg.newton_steps {
        let derivs = collect_machines(
            exec.map_mut(machines, |_, m| {
                let MachineState { data, params, v, stats, .. } = m;
                let corr = Correlation::new(params.theta.nu);
                let s = cached_stats(stats, data, &params.theta, knots, cfg, cfg.deriv_mode == DerivMode::Analytic)?;
                let f = f_theta_derivs_from(data, knots, &corr, s, v, params, cfg.jitter, cfg.deriv_mode)?;
                let h = h_theta_derivs(v, knots, &params.theta, cfg.jitter, cfg.deriv_mode)?;
                Ok((f, h))
            }),
            "θ derivatives",
        )?;
        let (hf, gf): (Vec<Mat>, Vec<Vector>) = derivs.iter().map(|(f, _)| (f.hess.clone(), f.grad.clone())).unzip();
        let (hh, gh): (Vec<Mat>, Vec<Vector>) = derivs.iter().map(|(_, h)| (h.hess.clone(), h.grad.clone())).unzip();
        net.track(&mut acc.y_hf, hf)?;
        net.track(&mut acc.y_gf, gf)?;
        let hh = net.mix(&hh)?;
        let gh = net.mix(&gh)?;
        let (yh, yg) = (acc.y_hf.values(), acc.y_gf.values());
        let steps = collect_machines(
            exec.map_mut(machines, |j, m| {
                let mut h = &yh[j] + &hh[j] / jf;
                linalg::symmetrize(&mut h);
                let g = &yg[j] + &gh[j] / jf;
                let scale = 1.0 + linalg::sym_eigen(&h).eigenvalues.amax();
                let hm = objective::md(&h, cfg.md_eps_rel * scale, cfg.md_lambda_min_rel * scale)?;
                let d = -SpdFactor::new(&hm, "modified Newton system")?.solve_vec(&g);
                newton_step(m, &d, knots, cfg, n_machines)
            }),
            "θ Newton step",
        )?;
        let mut largest = 0.0f64;
        for (j, (moved, stalled)) in steps.into_iter().enumerate() {
            largest = largest.max(moved);
            stalls[j] |= stalled;
        }
        if largest < cfg.newton_tol {
            break;
        }
    }
    // Every machine steps along (nearly) the same tracked average direction,
    // so differences between the θ_j would otherwise never shrink.
    let thetas: Vec<Vector> = machines
        .iter()
        .map(|m| Vector::from_vec(vec![m.params.theta.sigma, m.params.theta.beta]))
        .collect();
    let mixed = net.mix(&thetas)?;
    for (m, th) in machines.iter_mut().zip(mixed) {
        m.params.theta = m.params.theta.with_sigma_beta(th[0], th[1]);
    }
    Ok(stalls)
}

/// Applies α·d with α halved from 1 until acceptable. Returns the size of
/// the applied step and whether no α was acceptable.
fn newton_step(m: &mut MachineState, d: &Vector, knots: &KnotSet, cfg: &RunConfig, n_machines: usize) -> Result<(f64, bool)> {
    let rule = &cfg.step;
    let theta0 = [m.params.theta.sigma, m.params.theta.beta];
    let single = n_machines == 1;
    let f0 = if single { Some(m.surrogate(knots, cfg, 1)?) } else { None };
    let saved_stats = m.stats.clone();
    let mut alpha = 1.0;
    for _ in 0..=rule.max_halvings {
        let cand = [theta0[0] + alpha * d[0], theta0[1] + alpha * d[1]];
        let capped = single || (0..2).all(|k| (alpha * d[k]).abs() <= rule.max_relative_step * theta0[k]);
        if in_box(cand, rule) && capped {
            m.params.theta = m.params.theta.with_sigma_beta(cand[0], cand[1]);
            let accept = match f0 {
                None => true,
                Some(f0) => match m.surrogate(knots, cfg, 1) {
                    Ok(f1) => f1.is_finite() && f1 <= f0 + 1e-12 * (1.0 + f0.abs()),
                    Err(_) => false,
                },
            };
            if accept {
                let moved = (alpha * d[0]).abs().max((alpha * d[1]).abs());
                return Ok((moved, false));
            }
        }
        alpha *= 0.5;
    }
    m.params.theta = m.params.theta.with_sigma_beta(theta0[0], theta0[1]);
    m.stats = saved_stats;
    Ok((0.0, true))
}
