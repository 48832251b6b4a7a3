//! Spatial data model: locations, datasets, knots, synthetic generation and
//! machine partitioning.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covkernel::{matern_cov, MaternParams};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

mod csvio;
pub use csvio::{read_dataset_csv, read_knots_csv, read_points_csv, write_dataset_csv, write_knots_csv, DatasetFile, UNASSIGNED};

/// A planar location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub coords: [f64; 2],
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { coords: [x, y] }
    }

    pub fn dist(&self, other: &Location) -> f64 {
        let dx = self.coords[0] - other.coords[0];
        let dy = self.coords[1] - other.coords[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Observations held by one machine (or the pooled data set).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub locations: Vec<Location>,
    pub z: Vector,
    /// n × p covariates; p may be zero.
    pub x: Mat,
}

impl SpatialDataset {
    pub fn new(locations: Vec<Location>, z: Vector, x: Mat) -> Result<Self> {
        let n = locations.len();
        if n == 0 {
            return Err(Error::arg("a dataset needs at least one observation"));
        }
        if z.len() != n || x.nrows() != n {
            return Err(Error::arg(format!(
                "dataset shapes disagree: {} locations, {} responses, {} covariate rows",
                n,
                z.len(),
                x.nrows()
            )));
        }
        if !locations.iter().all(Location::is_finite)
            || !z.iter().all(|v| v.is_finite())
            || !x.iter().all(|v| v.is_finite())
        {
            return Err(Error::arg("dataset contains non-finite values"));
        }
        Ok(SpatialDataset { locations, z, x })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Row subset in the given order.
    pub fn select(&self, rows: &[usize]) -> SpatialDataset {
        let p = self.n_covariates();
        let locations = rows.iter().map(|&i| self.locations[i]).collect();
        let z = Vector::from_iterator(rows.len(), rows.iter().map(|&i| self.z[i]));
        let x = Mat::from_fn(rows.len(), p, |r, c| self.x[(rows[r], c)]);
        SpatialDataset { locations, z, x }
    }

    /// Stacks datasets row-wise (the pooled data a centralized fit sees).
    pub fn concat(parts: &[SpatialDataset]) -> Result<SpatialDataset> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to concatenate"))?;
        let p = first.n_covariates();
        if parts.iter().any(|d| d.n_covariates() != p) {
            return Err(Error::arg("datasets disagree on the number of covariates"));
        }
        let n: usize = parts.iter().map(SpatialDataset::len).sum();
        let mut locations = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut x = Mat::zeros(n, p);
        let mut row = 0;
        for d in parts {
            locations.extend_from_slice(&d.locations);
            z.extend(d.z.iter());
            for i in 0..d.len() {
                for c in 0..p {
                    x[(row + i, c)] = d.x[(i, c)];
                }
            }
            row += d.len();
        }
        Ok(SpatialDataset { locations, z: Vector::from_vec(z), x })
    }
}

/// Knot locations defining the low-rank subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSet {
    knots: Vec<Location>,
}

impl KnotSet {
    pub fn new(knots: Vec<Location>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::arg("at least one knot is required"));
        }
        if !knots.iter().all(Location::is_finite) {
            return Err(Error::arg("knot coordinates must be finite"));
        }
        let mut sorted: Vec<[f64; 2]> = knots.iter().map(|k| k.coords).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::arg("knots must be pairwise distinct"));
        }
        Ok(KnotSet { knots })
    }

    /// Uniform sample of `m` locations without replacement.
    pub fn sample_from(locations: &[Location], m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > locations.len() {
            return Err(Error::arg(format!(
                "cannot draw {m} knots from {} locations",
                locations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, locations.len(), m);
        KnotSet::new(idx.iter().map(|i| locations[i]).collect())
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.knots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    Random,
    AreaBased,
    /// Random seed points, each bringing its `k` nearest neighbours.
    RandomPlusNeighbors(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub machines: usize,
    pub seed: u64,
}

/// Parameters of the data-generating low-rank model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub gamma: Vec<f64>,
    /// Nugget standard deviation; the precision is τ⁻².
    pub tau: f64,
    pub theta: MaternParams,
}

impl TrueModel {
    pub fn new(gamma: Vec<f64>, tau: f64, theta: MaternParams) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::arg(format!("nugget std must be positive, got {tau}")));
        }
        Ok(TrueModel { gamma, tau, theta })
    }

    pub fn delta(&self) -> f64 {
        self.tau.powi(-2)
    }
}

/// Jittered square grid: `grid_side²` points with the given spacing, each
/// coordinate moved by U[-jitter_frac, jitter_frac]·spacing.
pub fn generate_locations(
    grid_side: usize,
    spacing: f64,
    jitter_frac: f64,
    seed: u64,
) -> Result<Vec<Location>> {
    if grid_side == 0 {
        return Err(Error::arg("grid_side must be at least 1"));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::arg(format!("spacing must be positive, got {spacing}")));
    }
    if !(0.0..0.5).contains(&jitter_frac) {
        return Err(Error::arg(format!("jitter_frac must lie in [0, 0.5), got {jitter_frac}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grid_side * grid_side);
    for i in 0..grid_side {
        for j in 0..grid_side {
            let mut c = [i as f64 * spacing, j as f64 * spacing];
            if jitter_frac > 0.0 {
                for v in &mut c {
                    *v += rng.gen_range(-jitter_frac..=jitter_frac) * spacing;
                }
            }
            out.push(Location { coords: c });
        }
    }
    Ok(out)
}

/// `n` jittered grid locations: the smallest square grid holding `n` points,
/// subsampled without replacement when `n` is not a perfect square.
pub fn generate_n_locations(n: usize, spacing: f64, jitter_frac: f64, seed: u64) -> Result<Vec<Location>> {
    if n == 0 {
        return Err(Error::arg("n must be at least 1"));
    }
    let side = (n as f64).sqrt().ceil() as usize;
    let grid = generate_locations(side, spacing, jitter_frac, seed)?;
    if grid.len() == n {
        return Ok(grid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut idx = rand::seq::index::sample(&mut rng, grid.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| grid[i]).collect())
}

/// Latent pieces of a simulated dataset, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct SimulationComponents {
    pub eta: Vector,
    /// B(θ)η at every location.
    pub spatial: Vector,
    pub noise: Vector,
}

/// Draws z = Xγ + B(θ)η + ε with η ~ N(0, K(θ)), ε ~ N(0, τ²I) and
/// standard-normal covariates.
pub fn simulate_dataset(
    locs: &[Location],
    knots: &KnotSet,
    model: &TrueModel,
    p: usize,
    seed: u64,
) -> Result<SpatialDataset> {
    simulate_dataset_with_components(locs, knots, model, p, seed).map(|(d, _)| d)
}

pub fn simulate_dataset_with_components(
    locs: &[Location],
    knots: &KnotSet,
    model: &TrueModel,
    p: usize,
    seed: u64,
) -> Result<(SpatialDataset, SimulationComponents)> {
    if p != model.gamma.len() {
        return Err(Error::arg(format!(
            "p = {p} but the coefficient vector has {} entries",
            model.gamma.len()
        )));
    }
    if locs.is_empty() {
        return Err(Error::arg("no locations to simulate at"));
    }
    let n = locs.len();
    let m = knots.len();
    let theta = &model.theta;
    let kk = Mat::from_fn(m, m, |i, j| matern_cov(knots.locations()[i].dist(&knots.locations()[j]), theta));
    let chol = nalgebra::Cholesky::new(kk).ok_or_else(|| {
        Error::num("knot covariance is not positive definite (duplicate knots or jitter needed?)")
    })?;
    let c = Mat::from_fn(n, m, |i, j| matern_cov(locs[i].dist(&knots.locations()[j]), theta));
    // B = C K⁻¹ computed as (K⁻¹ Cᵀ)ᵀ.
    let b = chol.solve(&c.transpose()).transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let white = Vector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let noise = Vector::from_fn(n, |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        model.tau * e
    });

    let eta = chol.l() * &white;
    let spatial = &b * &eta;
    let gamma = Vector::from_column_slice(&model.gamma);
    let z = &x * &gamma + &spatial + &noise;
    let data = SpatialDataset::new(locs.to_vec(), z, x)?;
    Ok((data, SimulationComponents { eta, spatial, noise }))
}

/// Splits `data` across machines.
pub fn partition(data: &SpatialDataset, spec: &PartitionSpec) -> Result<Vec<SpatialDataset>> {
    let n = data.len();
    let j = spec.machines;
    if j == 0 {
        return Err(Error::arg("at least one machine is required"));
    }
    if j > n {
        return Err(Error::arg(format!("cannot spread {n} observations over {j} machines")));
    }
    if j == 1 {
        return Ok(vec![data.clone()]);
    }
    let groups = match spec.scheme {
        PartitionScheme::Random => random_groups(n, j, spec.seed),
        PartitionScheme::AreaBased => area_groups(&data.locations, j),
        PartitionScheme::RandomPlusNeighbors(k) => neighbor_groups(&data.locations, j, k, spec.seed),
    };
    Ok(groups.iter().map(|rows| data.select(rows)).collect())
}

fn random_groups(n: usize, j: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut groups = vec![Vec::new(); j];
    for (pos, row) in perm.into_iter().enumerate() {
        groups[pos % j].push(row);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

/// Grid shape r × c = j with r ≤ c as close to square as possible; a prime
/// `j` degenerates to 1 × j column strips.
fn grid_shape(j: usize) -> (usize, usize) {
    let mut r = (j as f64).sqrt().floor() as usize;
    while r > 1 && j % r != 0 {
        r -= 1;
    }
    (r.max(1), j / r.max(1))
}

/// Splits `rows` into `parts` equal-count slabs ordered by coordinate `axis`.
fn quantile_split(rows: &mut [usize], locs: &[Location], axis: usize, parts: usize) -> Vec<Vec<usize>> {
    rows.sort_by(|&a, &b| {
        locs[a].coords[axis]
            .partial_cmp(&locs[b].coords[axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n = rows.len();
    (0..parts)
        .map(|k| rows[k * n / parts..(k + 1) * n / parts].to_vec())
        .collect()
}

fn area_groups(locs: &[Location], j: usize) -> Vec<Vec<usize>> {
    let (r, c) = grid_shape(j);
    let mut all: Vec<usize> = (0..locs.len()).collect();
    let mut groups = Vec::with_capacity(j);
    for mut strip in quantile_split(&mut all, locs, 0, c) {
        for mut block in quantile_split(&mut strip, locs, 1, r) {
            block.sort_unstable();
            groups.push(block);
        }
    }
    groups
}

/// Indices of the `k` nearest neighbours of `centre` (excluding itself),
/// ties broken by index.
fn nearest(locs: &[Location], centre: usize, k: usize) -> Vec<usize> {
    let k = k.min(locs.len() - 1);
    if k == 0 {
        return Vec::new();
    }
    let mut cand: Vec<(f64, usize)> = locs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != centre)
        .map(|(i, l)| (l.dist(&locs[centre]), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
    cand.select_nth_unstable_by(k - 1, cmp);
    cand.truncate(k);
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Each machine draws ⌈(N/J)/(k+1)⌉ disjoint random seed points and takes
/// every seed together with its k nearest neighbours. Neighbourhoods may
/// overlap across machines, so rows can be duplicated; k = 0 reduces to a
/// random partition.
fn neighbor_groups(locs: &[Location], j: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = locs.len();
    if k == 0 {
        return random_groups(n, j, seed);
    }
    let per_machine = n.div_ceil(j);
    let seeds_per = per_machine.div_ceil(k + 1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (seeds_per * j).min(n);
    let picked = rand::seq::index::sample(&mut rng, n, total).into_vec();
    let mut groups = Vec::with_capacity(j);
    for m in 0..j {
        let lo = (m * total) / j;
        let hi = ((m + 1) * total) / j;
        let mut rows: Vec<usize> = Vec::new();
        for &s in &picked[lo..hi] {
            rows.push(s);
            rows.extend(nearest(locs, s, k));
        }
        rows.sort_unstable();
        rows.dedup();
        groups.push(rows);
    }
    groups
}

/// Dense n × n Matérn covariance of a location set. Test and diagnostic use.
pub fn dense_covariance(locs: &[Location], theta: &MaternParams) -> Mat {
    let n = locs.len();
    DMatrix::from_fn(n, n, |i, j| matern_cov(locs[i].dist(&locs[j]), theta))
}
