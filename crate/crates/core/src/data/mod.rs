//! Datasets, synthetic generation, non-IID partitioning and client splits.

pub mod partition;
pub mod prds;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use partition::{
    largest_remainder, mean_max_class_share, partition_dirichlet, partition_pathological, split_client, Assignment,
    ClientSplit, PartitionSpec,
};
pub use prds::{load_dataset, save_dataset, DatasetError};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (n, per-sample dims...)
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.dims().len() < 2 {
            return Err(Error::Shape("features need a leading sample axis".into()));
        }
        if labels.is_empty() || labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config("a dataset needs at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_dims(&self) -> &[usize] {
        &self.features.dims()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Stacks the selected samples into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.sample_dims());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(dims, data), labels)
    }
}

/// Gaussian class clusters around random anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: Vec<usize>,
    pub n_per_class: usize,
    /// Per-class standard deviation around the anchor.
    pub spread: f64,
    /// Standard deviation of the anchor coordinates; smaller is harder.
    pub separation: f64,
}

/// Samples are stored class by class and rounded to `f32` so that they
/// survive a PRDS round trip unchanged.
pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.n_per_class == 0 || spec.dims.is_empty() || spec.dims.contains(&0) {
        return Err(Error::Config("n_per_class and dims must be positive".into()));
    }
    if !(spec.spread >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::Config("spread and separation must be nonnegative".into()));
    }
    let width: usize = spec.dims.iter().product();
    let anchors: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..width)
                .map(|_| spec.separation * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect();
    let n = spec.num_classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for (c, anchor) in anchors.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &a in anchor {
                let z: f64 = StandardNormal.sample(rng);
                data.push((a + spec.spread * z) as f32 as f64);
            }
            labels.push(c);
        }
    }
    let mut dims = vec![n];
    dims.extend_from_slice(&spec.dims);
    Dataset::new(Tensor::new(dims, data)?, labels, spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec(spread: f64) -> SyntheticSpec {
        SyntheticSpec { num_classes: 8, dims: vec![16], n_per_class: 100, spread, separation: 1.0 }
    }

    #[test]
    fn zero_spread_collapses_to_anchor() {
        let ds = gen_synthetic(&spec(0.0), &mut rng::derive(1, &[])).unwrap();
        for c in 0..8 {
            let first = ds.features().row(c * 100).to_vec();
            for i in 0..100 {
                assert_eq!(ds.features().row(c * 100 + i), &first[..]);
            }
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = gen_synthetic(&spec(1.0), &mut rng::derive(4, &[])).unwrap();
        let b = gen_synthetic(&spec(1.0), &mut rng::derive(4, &[])).unwrap();
        assert_eq!(a.len(), 800);
        assert_eq!(a.class_counts(), vec![100; 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn gather_keeps_sample_dims() {
        let s = SyntheticSpec { num_classes: 2, dims: vec![1, 4, 4], n_per_class: 3, spread: 1.0, separation: 1.0 };
        let ds = gen_synthetic(&s, &mut rng::derive(0, &[])).unwrap();
        let (x, y) = ds.gather(&[5, 0]);
        assert_eq!(x.dims(), &[2, 1, 4, 4]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.row(0), ds.features().row(5));
    }
}
