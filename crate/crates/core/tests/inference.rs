mod common;

use common::{as_params, max_rel, simulate, truth};
use spatial_dbcd::covkernel::{correlation_matrix, Correlation, MaternParams};
use spatial_dbcd::dbcd::{local_posterior, run_from, MachineState, RunConfig};
use spatial_dbcd::geo::{partition, Location, PartitionScheme, PartitionSpec};
use spatial_dbcd::inference::*;
use spatial_dbcd::linalg::{Mat, SpdFactor, Vector};
use spatial_dbcd::network::{Network, Topology};
use spatial_dbcd::objective::{nll, ModelParams};
use spatial_dbcd::par::Execution;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn mat_rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax() / b.amax()
}

#[test]
fn prediction_far_from_knots_reverts_to_regression() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 2);
    let (data, knots) = simulate(100, 8, &model, 1);
    let params = as_params(&model);
    let v = local_posterior(&data, &knots, &params, 0.0).unwrap();
    let far = vec![Location::new(50.0, 50.0), Location::new(-40.0, 10.0)];
    let x = Mat::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
    let pred = predict(&far, &x, &knots, &params, &v).unwrap();
    let expect = &x * &params.gamma;
    assert!((&pred.mean - &expect).amax() < 1e-12);
    assert!((&pred.cov - Mat::identity(2, 2) / params.delta).amax() < 1e-12);
    assert!((pred.marginal_std()[0] - 0.5).abs() < 1e-12);
}

/// Conditional mean of z^P given z under the low-rank model, from dense
/// N × N matrices.
fn dense_kriging_mean(
    data: &spatial_dbcd::geo::SpatialDataset,
    knots: &spatial_dbcd::geo::KnotSet,
    params: &ModelParams,
    new_locs: &[Location],
    new_x: &Mat,
) -> Vector {
    let corr = Correlation::new(params.theta.nu);
    let beta = params.theta.beta;
    let s2 = params.theta.sigma.powi(2);
    let (rk, _) = correlation_matrix(knots.locations(), knots.locations(), beta, &corr, false);
    let k = &rk * s2;
    let rk_inv = rk.clone().try_inverse().unwrap();
    let b = correlation_matrix(&data.locations, knots.locations(), beta, &corr, false).0 * &rk_inv;
    let bp = correlation_matrix(new_locs, knots.locations(), beta, &corr, false).0 * &rk_inv;
    let n = data.len();
    let c = &b * &k * b.transpose() + Mat::identity(n, n) / params.delta;
    let resid = &data.z - &data.x * &params.gamma;
    let weights = SpdFactor::new(&c, "C").unwrap().solve_vec(&resid);
    new_x * &params.gamma + &bp * &k * (b.transpose() * weights)
}

#[test]
fn exact_fit_prediction_matches_dense_kriging() {
    let model = truth(0.6, 1.0, 0.15, 0.5, 2);
    let (data, knots) = simulate(240, 15, &model, 7);
    let held_out = vec![Location::new(0.137, 0.211)];
    let x_new = Mat::from_row_slice(1, 2, &[0.4, -1.1]);
    let out = fit_centralized(&data, &knots, &RunConfig::default()).unwrap();
    let st = &out.states[0];
    let pred = predict(&held_out, &x_new, &knots, &st.params, &st.v).unwrap();
    let dense = dense_kriging_mean(&data, &knots, &st.params, &held_out, &x_new);
    assert!(rel(pred.mean[0], dense[0]) < 1e-6, "{} vs {}", pred.mean[0], dense[0]);
}

#[test]
fn predictive_covariance_is_psd() {
    let model = truth(0.4, 1.3, 0.2, 1.5, 1);
    let (data, knots) = simulate(150, 20, &model, 3);
    let params = as_params(&model);
    let v = local_posterior(&data, &knots, &params, 0.0).unwrap();
    let new_locs: Vec<Location> = (0..40).map(|i| Location::new(0.005 * i as f64, 0.21 - 0.003 * i as f64)).collect();
    let x = Mat::from_fn(40, 1, |i, _| (i as f64).sin());
    let pred = predict(&new_locs, &x, &knots, &params, &v).unwrap();
    let eig = pred.cov.clone().symmetric_eigen().eigenvalues;
    assert!(eig.min() >= -1e-10);
}

#[test]
fn consensus_assembly_matches_direct_sums() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 3);
    let (data, knots) = simulate(400, 20, &model, 11);
    let parts = partition(&data, &PartitionSpec { scheme: PartitionScheme::Random, machines: 4, seed: 2 }).unwrap();
    let params = as_params(&model);
    let direct = estimate_variances(&parts, &knots, &params, 0.0, Assembly::Direct).unwrap();
    let mut net = Network::new(Topology::complete(4).unwrap(), 60, Execution::Sequential).unwrap();
    let gossip = estimate_variances(&parts, &knots, &params, 0.0, Assembly::Consensus(&mut net)).unwrap();
    assert!(mat_rel(&gossip.v_gamma, &direct.v_gamma) < 1e-8);
    assert!(rel(gossip.v_delta, direct.v_delta) < 1e-8);
    assert!(mat_rel(&gossip.v_theta, &direct.v_theta) < 1e-8);
    let pooled = estimate_variances(std::slice::from_ref(&data), &knots, &params, 0.0, Assembly::Direct).unwrap();
    assert!(mat_rel(&pooled.v_gamma, &direct.v_gamma) < 1e-10);
    assert!(rel(pooled.v_delta, direct.v_delta) < 1e-10);
}

#[test]
fn consensus_assembly_on_a_sparse_graph_converges_with_rounds() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 2);
    let (data, knots) = simulate(300, 12, &model, 12);
    let parts = partition(&data, &PartitionSpec { scheme: PartitionScheme::Random, machines: 5, seed: 3 }).unwrap();
    let params = as_params(&model);
    let direct = estimate_variances(&parts, &knots, &params, 0.0, Assembly::Direct).unwrap();
    let mut net = Network::new(Topology::path(5).unwrap(), 400, Execution::Sequential).unwrap();
    let gossip = estimate_variances(&parts, &knots, &params, 0.0, Assembly::Consensus(&mut net)).unwrap();
    assert!(mat_rel(&gossip.v_gamma, &direct.v_gamma) < 1e-8);
    assert!(rel(gossip.v_delta, direct.v_delta) < 1e-8);
}

#[test]
fn iid_limit_reproduces_regression_standard_errors() {
    // N = 10000, δ = 0.25 and standard-normal covariates: std(γ̂) ≈ 0.020 and
    // std(δ̂) = δ√2/√N ≈ 0.0035.
    let model = truth(2.0, 1.0, 0.1, 0.5, 5);
    let (data, knots) = simulate(10_000, 10, &model, 5);
    let mut params = as_params(&model);
    params.theta = MaternParams::new(1e-6, 0.1, 0.5).unwrap();
    let vars = estimate_variances(std::slice::from_ref(&data), &knots, &params, 0.0, Assembly::Direct).unwrap();
    let n = data.len() as f64;
    let xtx = data.x.transpose() * &data.x;
    assert!(mat_rel(&vars.v_gamma, &(&xtx * (params.delta / n))) < 1e-8);
    assert!(rel(vars.v_delta, 0.5 / (params.delta * params.delta)) < 1e-8);
    // Standard errors straight from the information blocks; the θ block is
    // degenerate this close to σ = 0.
    let vg_inv = vars.v_gamma.clone().try_inverse().unwrap();
    for i in 0..5 {
        let std = (vg_inv[(i, i)] / n).sqrt();
        assert!((std - 0.020).abs() < 0.0008, "γ std {std}");
    }
    let delta_std = (1.0 / (n * vars.v_delta)).sqrt();
    assert!((delta_std - 0.25 * 2f64.sqrt() / 100.0).abs() < 1e-6);
    assert!((delta_std - 0.0035).abs() < 0.0001);
}

fn some_intervals(level: f64) -> ConfidenceIntervals {
    let model = truth(0.5, 1.0, 0.1, 0.5, 2);
    let (data, knots) = simulate(300, 15, &model, 21);
    let params = fit_centralized(&data, &knots, &RunConfig::default()).unwrap().states[0].params.clone();
    let vars = estimate_variances(std::slice::from_ref(&data), &knots, &params, 0.0, Assembly::Direct).unwrap();
    confidence_intervals(&vars, &params, data.len(), knots.len(), level).unwrap()
}

#[test]
fn interval_half_width_is_normal_quantile_times_std() {
    assert!((normal_quantile(0.95).unwrap() - 1.959963984540054).abs() < 1e-12);
    let ci = some_intervals(0.95);
    for (name, iv) in ci.named() {
        assert!(iv.std > 0.0, "{name}");
        assert!(iv.lower <= iv.point && iv.point <= iv.upper);
        assert!(rel(iv.upper - iv.point, 1.959964 * iv.std) < 1e-6, "{name}");
        assert!(rel(iv.point - iv.lower, iv.upper - iv.point) < 1e-12, "{name}");
    }
}

#[test]
fn intervals_widen_with_level() {
    let (a, b) = (some_intervals(0.8), some_intervals(0.99));
    for ((_, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        assert!(y.upper - y.lower > x.upper - x.lower);
    }
    assert!(normal_quantile(1.0).is_err());
    assert!(normal_quantile(0.0).is_err());
}

#[test]
fn regression_and_nugget_widths_shrink_like_root_n() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 3);
    let params = as_params(&model);
    let width = |n: usize, seed: u64| {
        let (data, knots) = simulate(n, 20, &model, seed);
        let vars = estimate_variances(std::slice::from_ref(&data), &knots, &params, 0.0, Assembly::Direct).unwrap();
        confidence_intervals(&vars, &params, data.len(), knots.len(), 0.95).unwrap()
    };
    let mut ratios_g = Vec::new();
    let mut ratios_d = Vec::new();
    for seed in 0..4 {
        let (small, big) = (width(1000, 100 + seed), width(2000, 200 + seed));
        ratios_g.extend(small.gamma.iter().zip(&big.gamma).map(|(a, b)| a.std / b.std));
        ratios_d.push(small.delta.std / big.delta.std);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&ratios_g) - 2f64.sqrt()).abs() < 0.1, "{ratios_g:?}");
    assert!((mean(&ratios_d) - 2f64.sqrt()).abs() < 0.1, "{ratios_d:?}");
}

#[test]
fn report_lists_every_parameter() {
    let ci = some_intervals(0.9);
    let report = ci.to_report();
    for key in ["level = 0.9", "N = 300", "m = 15", "[gamma_1]", "[gamma_2]", "[delta]", "[sigma]", "[beta]", "estimate = ", "std = ", "lower = ", "upper = "] {
        assert!(report.contains(key), "{key}");
    }
}

#[test]
fn centralized_fit_is_tight_and_locally_unique() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 2);
    let (data, knots) = simulate(400, 20, &model, 31);
    let cfg = RunConfig::default();
    let mut out = fit_centralized(&data, &knots, &cfg).unwrap();
    assert!(out.iterations < central_config(&cfg).iterations);
    let fitted = out.states[0].params.clone();
    let surrogate = out.states[0].surrogate(&knots, &cfg, 1).unwrap();
    let exact = nll(std::slice::from_ref(&data), &knots, &fitted).unwrap();
    assert!(rel(surrogate, exact) < 1e-8, "{surrogate} vs {exact}");

    let mut start = fitted.clone();
    start.gamma *= 1.05;
    start.delta *= 0.9;
    start.theta = start.theta.with_sigma_beta(fitted.theta.sigma * 1.1, fitted.theta.beta * 0.92);
    let v = local_posterior(&data, &knots, &start, 0.0).unwrap();
    let machine = MachineState::new(data.clone(), start, v).unwrap();
    let mut net = Network::new(Topology::complete(1).unwrap(), 1, Execution::Sequential).unwrap();
    let again = run_from(vec![machine], &knots, &mut net, &central_config(&cfg), None).unwrap();
    assert!(max_rel(&again.states[0].params, &fitted) < 1e-6);
}

#[test]
fn centralized_fit_without_covariates() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 0);
    let (data, knots) = simulate(300, 15, &model, 41);
    assert_eq!(data.n_covariates(), 0);
    let out = fit_centralized(&data, &knots, &RunConfig::default()).unwrap();
    let p = &out.states[0].params;
    assert!(p.gamma.is_empty());
    assert!(p.is_finite());
    assert!(rel(p.delta, 4.0) < 0.3);
}

#[test]
fn smoothness_search_table_matches_individual_fits() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 1);
    let (data, knots) = simulate(300, 15, &model, 51);
    let cfg = RunConfig::default();
    let search = estimate_nu(&data, &knots, &[0.5, 1.5], &cfg).unwrap();
    assert_eq!(search.table.len(), 2);
    for row in &search.table {
        let fit = row.outcome.as_ref().unwrap();
        let out = fit_centralized(&data, &knots, &RunConfig { nu: row.nu, ..cfg.clone() }).unwrap();
        assert_eq!(out.states[0].params, fit.params);
        let again = nll(std::slice::from_ref(&data), &knots, &fit.params).unwrap();
        assert_eq!(again, fit.nll);
    }
    let best = search.table.iter().min_by(|a, b| a.outcome.as_ref().unwrap().nll.total_cmp(&b.outcome.as_ref().unwrap().nll)).unwrap();
    assert_eq!(search.nu_hat, best.nu);
}

#[test]
fn single_candidate_is_returned() {
    let model = truth(0.5, 1.0, 0.1, 0.5, 1);
    let (data, knots) = simulate(200, 10, &model, 61);
    let search = estimate_nu(&data, &knots, &[0.9], &RunConfig::default()).unwrap();
    assert_eq!(search.nu_hat, 0.9);
    assert!(estimate_nu(&data, &knots, &[], &RunConfig::default()).is_err());
    assert!(estimate_nu(&data, &knots, &[0.5, -1.0], &RunConfig::default()).is_err());
}
