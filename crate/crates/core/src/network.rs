//! Communication graphs, doubly stochastic weights and the consensus
//! operators machines use in place of global sums.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::par::Execution;

/// Undirected simple graph on `J` vertices labelled `0..J`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    /// Builds a graph from unordered pairs. Duplicate pairs collapse;
    /// self-loops and out-of-range vertices are rejected.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::arg("a topology needs at least one vertex"));
        }
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(Error::arg(format!("self-loop at vertex {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::arg(format!("edge ({a}, {b}) references a vertex outside 0..{n}")));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(Topology { n, edges })
    }

    pub fn complete(n: usize) -> Result<Self> {
        Topology::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn path(n: usize) -> Result<Self> {
        Topology::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Breadth-first reachability from vertex 0.
    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    /// Reads an `i,j` edge list (0-based, optional header line). When `n` is
    /// `None` the vertex count is one more than the largest index seen.
    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), message: format!("line {line}: {msg}") };
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(parse_err(idx + 1, format!("expected two fields, found {}", fields.len())));
            }
            match (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                (Ok(a), Ok(b)) => pairs.push((a, b)),
                _ if idx == 0 => continue,
                _ => return Err(parse_err(idx + 1, format!("cannot parse `{line}` as two vertex indices"))),
            }
        }
        let n = n.unwrap_or_else(|| pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1));
        Topology::new(n, pairs).map_err(|e| e.context(path.display()))
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = String::from("i,j\n");
        for (a, b) in self.edges() {
            out.push_str(&format!("{a},{b}\n"));
        }
        fs::write(path, out).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

const ER_MAX_RETRIES: usize = 100;

/// G(J, p) random graph, redrawn until connected. After a bounded number of
/// failed draws the last one is joined up with a random spanning tree.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Topology> {
    if n == 0 {
        return Err(Error::arg("an Erdős–Rényi graph needs at least one vertex"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::arg(format!("edge probability must lie in (0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = Vec::new();
    for _ in 0..ER_MAX_RETRIES {
        last.clear();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen::<f64>() < p {
                    last.push((i, j));
                }
            }
        }
        let topo = Topology::new(n, last.iter().copied())?;
        if topo.is_connected() {
            return Ok(topo);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        last.push((order[k], parent));
    }
    Topology::new(n, last)
}

/// Symmetric doubly stochastic weights together with their mixing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: Mat,
    rho: f64,
    /// Non-zero entries of each column as (row, weight), ascending rows.
    sparse: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    /// Wraps a user-supplied matrix after checking it is doubly stochastic.
    pub fn from_matrix(w: Mat) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(Error::arg("weight matrix must be square and non-empty"));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("weights must be finite and non-negative"));
        }
        for i in 0..n {
            let (r, c) = (w.row(i).sum(), w.column(i).sum());
            if (r - 1.0).abs() > 1e-12 || (c - 1.0).abs() > 1e-12 {
                return Err(Error::arg(format!("row/column {i} does not sum to one")));
            }
        }
        let rho = mixing_rate(&w);
        let sparse = (0..n)
            .map(|j| (0..n).filter(|&i| w[(i, j)] != 0.0).map(|i| (i, w[(i, j)])).collect())
            .collect();
        Ok(WeightMatrix { w, rho, sparse })
    }

    pub fn matrix(&self) -> &Mat {
        &self.w
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    /// Non-zero (i, w_ij) pairs feeding machine `j`.
    pub fn inbound(&self, j: usize) -> &[(usize, f64)] {
        &self.sparse[j]
    }
}

/// Metropolis–Hastings weights w_ij = 1/(1 + max(deg_i, deg_j)).
pub fn metropolis_weights(topo: &Topology) -> Result<WeightMatrix> {
    if !topo.is_connected() {
        return Err(Error::arg("metropolis weights need a connected topology"));
    }
    let n = topo.n_vertices();
    let deg = topo.degrees();
    let mut w = Mat::zeros(n, n);
    for (a, b) in topo.edges() {
        let v = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    WeightMatrix::from_matrix(w)
}

/// Largest eigenvalue magnitude of W - 11ᵀ/J, the per-round contraction of
/// the consensus error.
pub fn mixing_rate(w: &Mat) -> f64 {
    let n = w.nrows();
    if n <= 1 {
        return 0.0;
    }
    let mut centered = w - Mat::from_element(n, n, 1.0 / n as f64);
    linalg::symmetrize(&mut centered);
    let eig = linalg::sym_eigen(&centered);
    let rho = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    // Eigen solvers leave ~1e-16 residue where the exact value is zero.
    if rho < 1e-14 {
        0.0
    } else {
        rho
    }
}

/// Values that can be averaged entrywise.
pub trait Mixable: Clone + Send + Sync {
    fn shape(&self) -> (usize, usize);
    fn zeros_like(&self) -> Self;
    /// self += a · other
    fn add_scaled(&mut self, a: f64, other: &Self);
    fn n_floats(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }
}

impl Mixable for f64 {
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
}

impl Mixable for Vector {
    fn shape(&self) -> (usize, usize) {
        (self.len(), 1)
    }
    fn zeros_like(&self) -> Self {
        Vector::zeros(self.len())
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.axpy(a, other, 1.0);
    }
}

impl Mixable for Mat {
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
    fn zeros_like(&self) -> Self {
        Mat::zeros(self.nrows(), self.ncols())
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.zip_apply(other, |x, y| *x += a * y);
    }
}

fn check_shapes<T: Mixable>(values: &[T], n: usize) -> Result<()> {
    if values.len() != n {
        return Err(Error::arg(format!("expected {n} per-machine values, got {}", values.len())));
    }
    if let Some(first) = values.first() {
        let s = first.shape();
        if let Some(j) = values.iter().position(|v| v.shape() != s) {
            return Err(Error::arg(format!("machine {j} holds a value of shape {:?}, expected {s:?}", values[j].shape())));
        }
    }
    Ok(())
}

fn mix_once<T: Mixable>(values: &[T], w: &WeightMatrix, exec: Execution) -> Vec<T> {
    exec.map_range(values.len(), |j| {
        let mut acc = values[j].zeros_like();
        for &(i, wij) in w.inbound(j) {
            acc.add_scaled(wij, &values[i]);
        }
        acc
    })
}

/// K rounds of y_j ← Σ_i w_ij y_i, i.e. multiplication by W^K without
/// forming it.
pub fn multi_consensus<T: Mixable>(values: &[T], w: &WeightMatrix, k: usize) -> Result<Vec<T>> {
    multi_consensus_with(values, w, k, Execution::Sequential)
}

pub fn multi_consensus_with<T: Mixable>(values: &[T], w: &WeightMatrix, k: usize, exec: Execution) -> Result<Vec<T>> {
    check_shapes(values, w.n())?;
    let mut cur = values.to_vec();
    for _ in 0..k {
        cur = mix_once(&cur, w, exec);
    }
    Ok(cur)
}

/// Per-machine tracking state of dynamic consensus: the running estimates
/// y_j and the contributions a_j that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusAccumulator<T> {
    y: Vec<T>,
    prev: Vec<T>,
}

impl<T: Mixable> ConsensusAccumulator<T> {
    /// y⁰_j = a_j(x⁰).
    pub fn new(initial: Vec<T>) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::arg("an accumulator needs at least one machine"));
        }
        check_shapes(&initial, initial.len())?;
        Ok(ConsensusAccumulator { y: initial.clone(), prev: initial })
    }

    pub fn values(&self) -> &[T] {
        &self.y
    }

    pub fn previous_contributions(&self) -> &[T] {
        &self.prev
    }
}

/// y_j ← Σ_i [W^K]_ij (y_i + a_i(x^t) - a_i(x^{t-1})); the new contributions
/// are remembered for the next step.
pub fn dynamic_consensus_step<T: Mixable>(
    acc: &mut ConsensusAccumulator<T>,
    new_contribs: Vec<T>,
    w: &WeightMatrix,
    k: usize,
) -> Result<()> {
    dynamic_consensus_step_with(acc, new_contribs, w, k, Execution::Sequential)
}

pub fn dynamic_consensus_step_with<T: Mixable>(
    acc: &mut ConsensusAccumulator<T>,
    new_contribs: Vec<T>,
    w: &WeightMatrix,
    k: usize,
    exec: Execution,
) -> Result<()> {
    check_shapes(&new_contribs, acc.y.len())?;
    if new_contribs[0].shape() != acc.y[0].shape() {
        return Err(Error::arg("new contributions change the accumulator shape"));
    }
    let drifted: Vec<T> = acc
        .y
        .iter()
        .zip(&new_contribs)
        .zip(&acc.prev)
        .map(|((y, a), p)| {
            let mut v = y.clone();
            v.add_scaled(1.0, a);
            v.add_scaled(-1.0, p);
            v
        })
        .collect();
    acc.y = multi_consensus_with(&drifted, w, k, exec)?;
    acc.prev = new_contribs;
    Ok(())
}

/// Counters of simulated traffic: one message per directed edge per round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub rounds: u64,
    pub messages: u64,
    pub floats: u64,
}

/// How a [`Network`] realizes averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// K rounds of neighbour gossip with W.
    #[default]
    Gossip,
    /// Every machine receives the exact global mean. A reference used to
    /// check what consensus is approximating; not a realizable protocol.
    Exact,
}

/// A synchronous in-process network: every averaging call is a barrier,
/// reads see the previous round's values only, and the traffic that real
/// machines would exchange is tallied.
#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    weights: WeightMatrix,
    rounds: usize,
    averaging: Averaging,
    exec: Execution,
    stats: CommStats,
}

impl Network {
    pub fn new(topology: Topology, rounds: usize, exec: Execution) -> Result<Self> {
        let weights = metropolis_weights(&topology)?;
        Ok(Network { topology, weights, rounds, averaging: Averaging::Gossip, exec, stats: CommStats::default() })
    }

    /// Replaces gossip by exact averaging; see [`Averaging::Exact`].
    pub fn exact(n: usize, exec: Execution) -> Result<Self> {
        let mut net = Network::new(Topology::complete(n)?, 1, exec)?;
        net.averaging = Averaging::Exact;
        Ok(net)
    }

    pub fn n_machines(&self) -> usize {
        self.topology.n_vertices()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    fn tally<T: Mixable>(&mut self, sample: &T, rounds: usize) {
        let per_round = 2 * self.topology.n_edges() as u64;
        self.stats.rounds += rounds as u64;
        self.stats.messages += per_round * rounds as u64;
        self.stats.floats += per_round * rounds as u64 * sample.n_floats() as u64;
    }

    fn exact_mean<T: Mixable>(values: &[T]) -> Vec<T> {
        let mut mean = values[0].zeros_like();
        let inv = 1.0 / values.len() as f64;
        for v in values {
            mean.add_scaled(inv, v);
        }
        vec![mean; values.len()]
    }

    /// Static multi-consensus with `k` rounds.
    pub fn mix_rounds<T: Mixable>(&mut self, values: &[T], k: usize) -> Result<Vec<T>> {
        check_shapes(values, self.n_machines())?;
        self.tally(&values[0], k);
        match self.averaging {
            Averaging::Gossip => multi_consensus_with(values, &self.weights, k, self.exec),
            Averaging::Exact if k == 0 => Ok(values.to_vec()),
            Averaging::Exact => Ok(Self::exact_mean(values)),
        }
    }

    /// Static multi-consensus with the network's default round count.
    pub fn mix<T: Mixable>(&mut self, values: &[T]) -> Result<Vec<T>> {
        self.mix_rounds(values, self.rounds)
    }

    /// One round of neighbour averaging, Σ_i w_ij v_i.
    pub fn mix_one<T: Mixable>(&mut self, values: &[T]) -> Result<Vec<T>> {
        self.mix_rounds(values, 1)
    }

    pub fn track<T: Mixable>(&mut self, acc: &mut ConsensusAccumulator<T>, new_contribs: Vec<T>) -> Result<()> {
        self.tally(&new_contribs[0], self.rounds);
        match self.averaging {
            Averaging::Gossip => dynamic_consensus_step_with(acc, new_contribs, &self.weights, self.rounds, self.exec),
            Averaging::Exact => {
                check_shapes(&new_contribs, acc.y.len())?;
                acc.y = Self::exact_mean(&new_contribs);
                acc.prev = new_contribs;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &Mat, b: &Mat, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn single_vertex() {
        let t = erdos_renyi(1, 0.5, 3).unwrap();
        assert_eq!(t.n_edges(), 0);
        assert!(t.is_connected());
        let w = metropolis_weights(&t).unwrap();
        assert_eq!(w.matrix()[(0, 0)], 1.0);
        assert_eq!(w.rho(), 0.0);
    }

    #[test]
    fn full_probability_gives_complete_graph() {
        let t = erdos_renyi(7, 1.0, 0).unwrap();
        assert_eq!(t.n_edges(), 21);
    }

    #[test]
    fn er_is_connected_and_reproducible() {
        for seed in 0..20 {
            let a = erdos_renyi(10, 0.5, seed).unwrap();
            assert!(a.is_connected());
            assert_eq!(a, erdos_renyi(10, 0.5, seed).unwrap());
        }
        assert_ne!(erdos_renyi(10, 0.5, 1).unwrap(), erdos_renyi(10, 0.5, 2).unwrap());
    }

    #[test]
    fn sparse_er_falls_back_to_spanning_tree() {
        let t = erdos_renyi(40, 0.001, 5).unwrap();
        assert!(t.is_connected());
    }

    #[test]
    fn er_rejects_bad_probability() {
        assert!(erdos_renyi(5, 0.0, 1).is_err());
        assert!(erdos_renyi(5, 1.5, 1).is_err());
    }

    #[test]
    fn path_metropolis_weights() {
        let w = metropolis_weights(&Topology::path(3).unwrap()).unwrap();
        let want = Mat::from_row_slice(3, 3, &[2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert!(approx_eq(w.matrix(), &want, 1e-15));
        assert!((w.rho() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_weights_average() {
        let w = metropolis_weights(&Topology::complete(5).unwrap()).unwrap();
        assert!(approx_eq(w.matrix(), &Mat::from_element(5, 5, 0.2), 1e-15));
        assert!(w.rho() < 1e-14);
    }

    #[test]
    fn identity_does_not_mix() {
        assert!((mixing_rate(&Mat::identity(4, 4)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_topology_rejected() {
        let t = Topology::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(metropolis_weights(&t), Err(Error::Argument(_))));
    }

    #[test]
    fn self_loops_rejected() {
        assert!(Topology::new(3, [(1, 1)]).is_err());
        assert!(Topology::new(3, [(1, 3)]).is_err());
    }

    #[test]
    fn consensus_examples() {
        let vals = vec![3.0, 0.0, 0.0];
        let c = metropolis_weights(&Topology::complete(3).unwrap()).unwrap();
        let out = multi_consensus(&vals, &c, 1).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let p = metropolis_weights(&Topology::path(3).unwrap()).unwrap();
        let out = multi_consensus(&vals, &p, 1).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15 && out[2].abs() < 1e-15);
        assert_eq!(multi_consensus(&vals, &p, 0).unwrap(), vals);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = metropolis_weights(&Topology::path(2).unwrap()).unwrap();
        let vals = vec![Vector::zeros(2), Vector::zeros(3)];
        assert!(multi_consensus(&vals, &p, 1).is_err());
        assert!(multi_consensus(&[1.0], &p, 1).is_err());
    }

    #[test]
    fn dynamic_consensus_tracks_time_varying_mean() {
        let topo = erdos_renyi(6, 0.5, 9).unwrap();
        let w = metropolis_weights(&topo).unwrap();
        let contrib = |t: usize| -> Vec<Vector> {
            (0..6).map(|j| Vector::from_vec(vec![(j * j) as f64 + t as f64, (t as f64 * 0.3 + j as f64).sin()])).collect()
        };
        let mut acc = ConsensusAccumulator::new(contrib(0)).unwrap();
        for t in 1..30 {
            let a = contrib(t);
            let total: Vector = a.iter().fold(Vector::zeros(2), |s, v| s + v);
            dynamic_consensus_step(&mut acc, a, &w, 2).unwrap();
            let tracked: Vector = acc.values().iter().fold(Vector::zeros(2), |s, v| s + v);
            assert!((tracked - total).amax() < 1e-10);
        }
    }

    #[test]
    fn dynamic_with_constant_contributions_is_static_mixing() {
        let w = metropolis_weights(&erdos_renyi(5, 0.6, 2).unwrap()).unwrap();
        let a: Vec<f64> = (0..5).map(|j| j as f64).collect();
        let mut acc = ConsensusAccumulator::new(a.clone()).unwrap();
        dynamic_consensus_step(&mut acc, a.clone(), &w, 3).unwrap();
        let y1 = acc.values().to_vec();
        dynamic_consensus_step(&mut acc, a, &w, 3).unwrap();
        let want = multi_consensus(&y1, &w, 3).unwrap();
        assert!(acc.values().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn dynamic_with_shared_contributions_is_exact() {
        let w = metropolis_weights(&erdos_renyi(4, 0.5, 1).unwrap()).unwrap();
        let mut acc = ConsensusAccumulator::new(vec![2.0; 4]).unwrap();
        for t in 0..10 {
            let v = (t as f64).cos();
            dynamic_consensus_step(&mut acc, vec![v; 4], &w, 1).unwrap();
            assert!(acc.values().iter().all(|y| (y - v).abs() < 1e-14));
        }
    }

    #[test]
    fn single_machine_accumulator_copies() {
        let w = metropolis_weights(&Topology::complete(1).unwrap()).unwrap();
        let mut acc = ConsensusAccumulator::new(vec![1.0]).unwrap();
        for v in [3.0, -1.0, 7.5] {
            dynamic_consensus_step(&mut acc, vec![v], &w, 6).unwrap();
            assert_eq!(acc.values(), &[v]);
        }
    }

    #[test]
    fn exact_network_averages() {
        let mut net = Network::exact(3, Execution::Sequential).unwrap();
        let out = net.mix(&[3.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0; 3]);
        let mut acc = ConsensusAccumulator::new(vec![0.0, 0.0, 6.0]).unwrap();
        net.track(&mut acc, vec![0.0, 0.0, 6.0]).unwrap();
        assert_eq!(acc.values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn traffic_is_counted_per_directed_edge() {
        let mut net = Network::new(Topology::path(3).unwrap(), 4, Execution::Sequential).unwrap();
        net.mix(&[Vector::zeros(5), Vector::zeros(5), Vector::zeros(5)]).unwrap();
        let s = net.stats();
        assert_eq!((s.rounds, s.messages, s.floats), (4, 16, 80));
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let t = erdos_renyi(8, 0.4, 11).unwrap();
        t.write_edge_list(&path).unwrap();
        assert_eq!(Topology::read_edge_list(&path, Some(8)).unwrap(), t);
        std::fs::write(&path, "0,1\n1,x\n").unwrap();
        assert!(matches!(Topology::read_edge_list(&path, None), Err(Error::Parse { .. })));
    }
}
