use std::collections::BTreeSet;

use rand::Rng;

use prfl::data::prds::{decode_dataset, encode_dataset};
use prfl::data::{
    gen_synthetic, largest_remainder, mean_max_class_share, partition_dirichlet, partition_pathological, split_client,
    Assignment, Dataset, SyntheticSpec,
};
use prfl::rng::derive;

fn dataset(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec { num_classes: classes, dims: vec![3], n_per_class: per_class, spread: 1.0, separation: 1.0 };
    gen_synthetic(&spec, &mut derive(seed, &[])).unwrap()
}

fn assert_cover(a: &Assignment, n: usize) {
    let mut seen = BTreeSet::new();
    for client in a {
        for &i in client {
            assert!(seen.insert(i), "index {i} assigned twice");
        }
    }
    assert_eq!(seen.len(), n);
    assert_eq!(seen.last().copied(), n.checked_sub(1));
}

#[test]
fn random_configs_cover_disjointly() {
    let mut rng = derive(9, &[]);
    for trial in 0..100 {
        let classes = rng.random_range(2..8);
        let per_class = rng.random_range(4..40);
        let ds = dataset(classes, per_class, trial);
        let clients = rng.random_range(1..12);
        let a = if trial % 2 == 0 {
            let lambda = [0.02, 0.1, 1.0, 100.0][rng.random_range(0..4)];
            partition_dirichlet(&ds, clients, lambda, None, &mut derive(trial, &[1])).unwrap()
        } else {
            let k = rng.random_range(1..3);
            if ds.len() < clients * k {
                continue;
            }
            partition_pathological(&ds, clients, k, &mut derive(trial, &[1])).unwrap()
        };
        assert_eq!(a.len(), clients);
        assert_cover(&a, ds.len());
        assert!(a.iter().all(|c| !c.is_empty()), "trial {trial}: empty client");
    }
}

#[test]
fn partitions_are_deterministic() {
    let ds = dataset(5, 20, 0);
    let a = partition_dirichlet(&ds, 7, 0.1, None, &mut derive(3, &[])).unwrap();
    let b = partition_dirichlet(&ds, 7, 0.1, None, &mut derive(3, &[])).unwrap();
    assert_eq!(a, b);
    let c = partition_pathological(&ds, 5, 2, &mut derive(3, &[])).unwrap();
    let d = partition_pathological(&ds, 5, 2, &mut derive(3, &[])).unwrap();
    assert_eq!(c, d);
}

#[test]
fn pathological_shard_aligned_label_limit() {
    for seed in 0..20 {
        // 10 clients × 2 shards = 20 shards of 20 samples; each class is exactly 2 shards
        let ds = dataset(10, 40, seed);
        let a = partition_pathological(&ds, 10, 2, &mut derive(seed, &[7])).unwrap();
        for client in &a {
            let labels: BTreeSet<usize> = client.iter().map(|&i| ds.labels()[i]).collect();
            assert!(labels.len() <= 2);
        }
    }
}

#[test]
fn dirichlet_skew_is_monotone_in_lambda() {
    let ds = dataset(8, 50, 0);
    let share = |lambda: f64| {
        (0..20)
            .map(|seed| {
                let a = partition_dirichlet(&ds, 10, lambda, None, &mut derive(seed, &[lambda.to_bits()])).unwrap();
                mean_max_class_share(&ds, &a)
            })
            .sum::<f64>()
            / 20.0
    };
    let shares: Vec<f64> = [0.02, 0.1, 1.0, 100.0].iter().map(|&l| share(l)).collect();
    assert!(shares.windows(2).all(|w| w[0] >= w[1]), "{shares:?}");
}

#[test]
fn split_sizes() {
    let idx: Vec<usize> = (0..10).collect();
    let (tr, va, te) = split_client(&idx, &mut derive(0, &[]));
    assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    let idx: Vec<usize> = (0..100).collect();
    let (tr, va, te) = split_client(&idx, &mut derive(0, &[]));
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    let all: BTreeSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
    assert_eq!(all.len(), 100);
    let (tr, va, te) = split_client(&[4, 5], &mut derive(0, &[]));
    assert_eq!((tr.len(), va.len(), te.len()), (2, 0, 0));
}

#[test]
fn largest_remainder_sums_exactly() {
    let mut rng = derive(1, &[]);
    for _ in 0..200 {
        let w: Vec<f64> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0.0..5.0)).collect();
        let total = rng.random_range(0..500);
        assert_eq!(largest_remainder(&w, total).iter().sum::<usize>(), total);
    }
}

#[test]
fn prds_round_trip() {
    let ds = dataset(3, 5, 2);
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(&bytes[..4], b"PRDS");
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.features(), ds.features());
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(decode_dataset(&bad).is_err());
}
