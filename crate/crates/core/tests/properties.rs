mod common;

use proptest::prelude::*;

use spatial_dbcd::covkernel::bessel::bessel_k;
use spatial_dbcd::covkernel::{Correlation, MaternParams};
use spatial_dbcd::dbcd::log_relative_error;
use spatial_dbcd::geo::{partition, read_dataset_csv, write_dataset_csv, DatasetFile, PartitionScheme, PartitionSpec};
use spatial_dbcd::linalg::{Mat, Vector};
use spatial_dbcd::network::{erdos_renyi, metropolis_weights, multi_consensus, ConsensusAccumulator, Network};
use spatial_dbcd::objective::{md, nll, ModelParams};
use spatial_dbcd::par::Execution;

fn sorted_rows(data: &spatial_dbcd::geo::SpatialDataset) -> Vec<(u64, u64, u64)> {
    let mut rows: Vec<_> = (0..data.len())
        .map(|i| (data.locations[i].coords[0].to_bits(), data.locations[i].coords[1].to_bits(), data.z[i].to_bits()))
        .collect();
    rows.sort_unstable();
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_weights_are_symmetric_and_doubly_stochastic(n in 2usize..15, p in 0.2f64..1.0, seed in any::<u64>()) {
        let topo = erdos_renyi(n, p, seed).unwrap();
        let w = metropolis_weights(&topo).unwrap();
        let m = w.matrix();
        prop_assert!((m - m.transpose()).amax() < 1e-15);
        for i in 0..n {
            prop_assert!((m.row(i).sum() - 1.0).abs() < 1e-14);
            prop_assert!(m.row(i).iter().all(|&v| v >= 0.0));
            for j in 0..n {
                if i != j && !topo.has_edge(i, j) {
                    prop_assert_eq!(m[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(w.rho() < 1.0);
    }

    #[test]
    fn gossip_keeps_the_average_and_contracts(n in 2usize..12, seed in any::<u64>(), values in prop::collection::vec(-10.0f64..10.0, 12), k in 1usize..20) {
        let w = metropolis_weights(&erdos_renyi(n, 0.5, seed).unwrap()).unwrap();
        let y = &values[..n];
        let mean = y.iter().sum::<f64>() / n as f64;
        let mixed = multi_consensus(y, &w, k).unwrap();
        prop_assert!((mixed.iter().sum::<f64>() / n as f64 - mean).abs() < 1e-12);
        let spread = |v: &[f64]| v.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        prop_assert!(spread(&mixed) <= w.rho().powi(k as i32) * spread(y) + 1e-12);
    }

    #[test]
    fn dynamic_consensus_tracks_a_moving_average(seed in any::<u64>(), steps in 1usize..30) {
        let n = 6;
        let mut net = Network::new(erdos_renyi(n, 0.6, seed).unwrap(), 3, Execution::Sequential).unwrap();
        let start: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut acc = ConsensusAccumulator::new(start).unwrap();
        let mut latest = Vec::new();
        for t in 0..steps {
            latest = (0..n).map(|i| ((i * 7 + t * 3) % 11) as f64).collect();
            net.track(&mut acc, latest.clone()).unwrap();
        }
        // The tracked values always average to the average of the latest contributions.
        let got = acc.values().iter().sum::<f64>() / n as f64;
        prop_assert!((got - latest.iter().sum::<f64>() / n as f64).abs() < 1e-10);
    }

    #[test]
    fn md_output_is_positive_definite_and_a_fixed_point(entries in prop::collection::vec(-5.0f64..5.0, 9)) {
        let a = Mat::from_column_slice(3, 3, &entries);
        let h = (&a + a.transpose()) * 0.5;
        let out = md(&h, 1e-8, 1e-6).unwrap();
        prop_assert!(out.clone().cholesky().is_some());
        let twice = md(&out, 1e-8, 1e-6).unwrap();
        prop_assert!((&twice - &out).amax() < 1e-10 * (1.0 + out.amax()));
    }

    #[test]
    fn correlation_is_one_at_zero_and_decreasing(nu in 0.2f64..3.0, beta in 0.01f64..1.0, d1 in 0.0f64..2.0, d2 in 0.0f64..2.0) {
        let c = Correlation::new(nu);
        prop_assert!((c.value(0.0, beta) - 1.0).abs() < 1e-12);
        let (near, far) = (d1.min(d2), d1.max(d2));
        let (a, b) = (c.value(near, beta), c.value(far, beta));
        prop_assert!(b <= a + 1e-12);
        prop_assert!(b >= 0.0 && a <= 1.0 + 1e-12);
    }

    #[test]
    fn bessel_recurrence(nu in 0.1f64..3.0, x in 0.05f64..30.0) {
        // K_{ν+1}(x) = K_{ν-1}(x) + (2ν/x) K_ν(x)
        let lhs = bessel_k(nu + 1.0, x).unwrap();
        let rhs = bessel_k(nu - 1.0, x).unwrap() + 2.0 * nu / x * bessel_k(nu, x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs());
        prop_assert!(bessel_k(nu, x).unwrap() > bessel_k(nu, x * 1.1).unwrap());
    }

    #[test]
    fn disjoint_partitions_cover_every_row_once(machines in 1usize..8, seed in any::<u64>(), area in any::<bool>()) {
        let model = common::truth(1.0, 1.0, 0.1, 0.5, 2);
        let (data, _) = common::simulate(120, 5, &model, seed % 1000);
        let scheme = if area { PartitionScheme::AreaBased } else { PartitionScheme::Random };
        let parts = partition(&data, &PartitionSpec { scheme, machines, seed }).unwrap();
        prop_assert_eq!(parts.len(), machines);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        let pooled = spatial_dbcd::geo::SpatialDataset::concat(&parts).unwrap();
        prop_assert_eq!(sorted_rows(&pooled), sorted_rows(&data));
    }

    #[test]
    fn likelihood_does_not_depend_on_the_split(machines in 1usize..6, seed in 0u64..500) {
        let model = common::truth(1.0, 1.0, 0.1, 0.5, 3);
        let (data, knots) = common::simulate(150, 10, &model, seed);
        let parts = partition(&data, &PartitionSpec { scheme: PartitionScheme::Random, machines, seed }).unwrap();
        let params = common::as_params(&model);
        let whole = nll(std::slice::from_ref(&data), &knots, &params).unwrap();
        prop_assert!((nll(&parts, &knots, &params).unwrap() - whole).abs() <= 1e-10 * whole.abs());
    }

    #[test]
    fn relative_error_vanishes_only_at_the_reference(scale in 0.5f64..2.0, shift in 1e-6f64..1.0) {
        let theta = MaternParams::new(scale, 0.1 * scale, 0.5).unwrap();
        let reference = ModelParams::new(Vector::from_vec(vec![1.0, -2.0]), 0.25, theta).unwrap();
        let mut moved = reference.clone();
        moved.delta *= 1.0 + shift;
        let truth = reference.clone();
        let near = log_relative_error(std::slice::from_ref(&reference), &reference, &truth).unwrap();
        let far = log_relative_error(&[reference.clone(), moved], &reference, &truth).unwrap();
        prop_assert!(near < far);
        prop_assert!((far - shift.log10()).abs() < 1e-6);
    }
}

#[test]
fn dataset_csv_round_trips_with_machine_labels() {
    let model = common::truth(1.0, 1.0, 0.1, 0.5, 3);
    let (data, _) = common::simulate(90, 6, &model, 3);
    let parts = partition(&data, &PartitionSpec { scheme: PartitionScheme::Random, machines: 3, seed: 3 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_dataset_csv(&path, &DatasetFile::from_parts(&parts).unwrap()).unwrap();
    let back = read_dataset_csv(&path).unwrap().split().unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in parts.iter().zip(&back) {
        assert_eq!(a.z, b.z);
        assert_eq!(a.x, b.x);
    }
}
