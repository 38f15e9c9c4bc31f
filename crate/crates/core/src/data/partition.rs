//! Non-IID client partitions and per-client train/val/test splits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};

/// Sample indices owned by each client.
pub type Assignment = Vec<Vec<usize>>;

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSplit {
    pub indices: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub clients: Vec<ClientSplit>,
}

impl PartitionSpec {
    pub fn from_assignment<R: Rng + ?Sized>(assignment: Assignment, rng: &mut R) -> Self {
        let clients = assignment
            .into_iter()
            .map(|indices| {
                let (train, val, test) = split_client(&indices, rng);
                ClientSplit { indices, train, val, test }
            })
            .collect();
        Self { clients }
    }

    pub fn assignment(&self) -> Assignment {
        self.clients.iter().map(|c| c.indices.clone()).collect()
    }
}

/// Integer counts proportional to `weights` that sum exactly to `total`.
///
/// Floors first, then hands the remainder to the largest fractional parts;
/// ties go to the lower index. All-zero weights are treated as uniform.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles `indices` and cuts 80/10/10. Fewer than 3 samples all go to train.
pub fn split_client<R: Rng + ?Sized>(indices: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    if shuffled.len() < 3 {
        log::warn!("client with {} samples: everything goes to train", shuffled.len());
        return (shuffled, Vec::new(), Vec::new());
    }
    let sizes = largest_remainder(&SPLIT_RATIOS, shuffled.len());
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let val = shuffled.split_off(sizes[0]);
    (shuffled, val, test)
}

/// Label-sorted shards dealt at random, `classes_per_client` shards each.
pub fn partition_pathological<R: Rng + ?Sized>(
    ds: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Assignment> {
    if n_clients == 0 || classes_per_client == 0 {
        return Err(Error::Config("clients and classes_per_client must be >= 1".into()));
    }
    let shards = n_clients * classes_per_client;
    if ds.len() < shards {
        return Err(Error::Config(format!(
            "{} samples cannot fill {shards} shards",
            ds.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..ds.len()).collect();
    sorted.sort_by_key(|&i| ds.labels()[i]);
    let sizes = largest_remainder(&vec![1.0; shards], ds.len());
    let mut pieces = Vec::with_capacity(shards);
    let mut start = 0;
    for s in sizes {
        pieces.push(sorted[start..start + s].to_vec());
        start += s;
    }
    let mut order: Vec<usize> = (0..shards).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(classes_per_client)
        .map(|chunk| {
            let mut idx: Vec<usize> = chunk.iter().flat_map(|&s| pieces[s].iter().copied()).collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Draws from `Dirichlet(concentration)` in log space, so tiny
/// concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) · U^(1/a)
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let g: f64 = Gamma::new(a + 1.0, 1.0).expect("shape > 1").sample(rng);
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / a
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; concentration.len()];
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Per-client class mixtures `q ~ Dirichlet(λ·prior)`; every class is divided
/// among clients in proportion to their mass on it.
///
/// `prior` defaults to the empirical class frequencies. Clients left empty
/// receive one sample from the currently largest client.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    ds: &Dataset,
    n_clients: usize,
    lambda: f64,
    prior: Option<&[f64]>,
    rng: &mut R,
) -> Result<Assignment> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if ds.len() < n_clients {
        return Err(Error::Config(format!("{} samples for {n_clients} clients", ds.len())));
    }
    let c = ds.num_classes();
    let counts = ds.class_counts();
    let prior: Vec<f64> = match prior {
        Some(p) if p.len() == c && p.iter().all(|v| *v >= 0.0) && p.iter().sum::<f64>() > 0.0 => {
            let s: f64 = p.iter().sum();
            p.iter().map(|v| v / s).collect()
        }
        Some(_) => return Err(Error::Config("prior must be a distribution over the classes".into())),
        None => counts.iter().map(|&k| k as f64 / ds.len() as f64).collect(),
    };
    let concentration: Vec<f64> = prior.iter().map(|p| lambda * p).collect();
    let mixtures: Vec<Vec<f64>> = (0..n_clients).map(|_| sample_dirichlet(&concentration, rng)).collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut out: Assignment = vec![Vec::new(); n_clients];
    for (class, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(rng);
        let weights: Vec<f64> = mixtures.iter().map(|q| q[class]).collect();
        let sizes = largest_remainder(&weights, members.len());
        let mut start = 0;
        for (client, s) in sizes.into_iter().enumerate() {
            out[client].extend_from_slice(&members[start..start + s]);
            start += s;
        }
    }
    while let Some(empty) = out.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| out[a].len().cmp(&out[b].len()).then(b.cmp(&a)))
            .expect("n_clients >= 1");
        let sample = out[donor].pop().expect("donor has samples");
        out[empty].push(sample);
    }
    for idx in &mut out {
        idx.sort_unstable();
    }
    Ok(out)
}

/// Mean over clients of the largest single-class share.
pub fn mean_max_class_share(ds: &Dataset, assignment: &Assignment) -> f64 {
    let shares: Vec<f64> = assignment
        .iter()
        .filter(|a| !a.is_empty())
        .map(|a| {
            let mut counts = vec![0usize; ds.num_classes()];
            for &i in a {
                counts[ds.labels()[i]] += 1;
            }
            *counts.iter().max().unwrap() as f64 / a.len() as f64
        })
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}
