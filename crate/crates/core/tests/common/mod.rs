#![allow(dead_code)]

use spatial_dbcd::covkernel::MaternParams;
use spatial_dbcd::geo::{generate_n_locations, simulate_dataset, KnotSet, SpatialDataset, TrueModel};
use spatial_dbcd::linalg::Vector;
use spatial_dbcd::objective::ModelParams;

pub const GAMMA: [f64; 5] = [-1.0, 2.0, 3.0, -2.0, 1.0];

pub fn truth(tau: f64, sigma: f64, beta: f64, nu: f64, p: usize) -> TrueModel {
    TrueModel::new(GAMMA[..p].to_vec(), tau, MaternParams::new(sigma, beta, nu).unwrap()).unwrap()
}

/// Jittered-grid data simulated from the low-rank model on `m` knots drawn
/// from the locations.
pub fn simulate(n: usize, m: usize, model: &TrueModel, seed: u64) -> (SpatialDataset, KnotSet) {
    let locs = generate_n_locations(n, 0.02, 0.4, seed).unwrap();
    let knots = KnotSet::sample_from(&locs, m, seed.wrapping_add(1)).unwrap();
    let data = simulate_dataset(&locs, &knots, model, model.gamma.len(), seed.wrapping_add(2)).unwrap();
    (data, knots)
}

pub fn as_params(model: &TrueModel) -> ModelParams {
    ModelParams::new(Vector::from_vec(model.gamma.clone()), model.delta(), model.theta).unwrap()
}

pub fn max_rel(a: &ModelParams, b: &ModelParams) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-12);
    let g = a.gamma.iter().zip(b.gamma.iter()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    g.max(rel(a.delta, b.delta)).max(rel(a.theta.sigma, b.theta.sigma)).max(rel(a.theta.beta, b.theta.beta))
}
