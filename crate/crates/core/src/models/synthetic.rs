//! Gaussian clusters with class 0 sitting at the origin.
//!
//! Zero imputation pulls every ablated input toward the origin, i.e. toward
//! the class-0 cluster, so a classifier trained on clean data drifts toward
//! class 0 as more features are removed. The size of the drift is controlled
//! by the cluster separation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, SplitFractions, Splits};
use crate::calib::ClassLabel;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub samples_per_class: usize,
    /// `m` rows of `n` coordinates; row 0 must be the zero vector.
    pub cluster_means: Vec<Vec<f64>>,
    pub cluster_scale: f64,
    #[serde(default)]
    pub splits: SplitFractions,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Class 0 at the origin; every other class centred on a random sign
    /// vector scaled to norm `separation`, so each class sits `separation`
    /// away from class 0 and every feature carries the same amount of signal.
    pub fn origin_attractor(
        m: usize,
        n: usize,
        samples_per_class: usize,
        separation: f64,
        cluster_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if m < 2 || n == 0 {
            return Err(Error::contract(format!(
                "need m >= 2 and n >= 1, got m = {m}, n = {n}"
            )));
        }
        if n < 63 && (1usize << n) < m - 1 {
            return Err(Error::contract(format!(
                "{n} features cannot give {} distinct sign vectors",
                m - 1
            )));
        }
        let mut rng = seeded(derive_seed(seed, 0xC1A55));
        let coord = separation / (n as f64).sqrt();
        let mut cluster_means = vec![vec![0.0; n]];
        while cluster_means.len() < m {
            let candidate: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.5) { coord } else { -coord })
                .collect();
            if !cluster_means.contains(&candidate) {
                cluster_means.push(candidate);
            }
        }
        let spec = Self {
            m,
            n,
            samples_per_class,
            cluster_means,
            cluster_scale,
            splits: SplitFractions::default(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default benchmark set: 3 classes, 16 features, separation six
    /// times the cluster scale.
    pub fn default_benchmark(seed: u64) -> Self {
        Self::origin_attractor(3, 16, 500, 6.0, 1.0, seed).expect("default spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::contract(format!("need m >= 2, got {}", self.m)));
        }
        if self.cluster_means.len() != self.m
            || self.cluster_means.iter().any(|r| r.len() != self.n)
        {
            return Err(Error::contract("cluster_means must be an m x n matrix"));
        }
        if self.cluster_means[0].iter().any(|&v| v != 0.0) {
            return Err(Error::contract("class 0 must be centred at the origin"));
        }
        for i in 0..self.m {
            for j in 0..i {
                if self.cluster_means[i] == self.cluster_means[j] {
                    return Err(Error::contract(format!(
                        "classes {j} and {i} share a cluster mean"
                    )));
                }
            }
        }
        if !(self.cluster_scale > 0.0) {
            return Err(Error::contract("cluster_scale must be > 0"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::contract("samples_per_class must be >= 1"));
        }
        self.splits.validate()
    }
}

/// Isotropic Gaussian clusters around `spec.cluster_means`, rows interleaved
/// by class, split by a seeded shuffle.
pub fn gen_synthetic_clusters(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(spec.seed, 0xDA7A));
    let rows = spec.m * spec.samples_per_class;
    let mut features = Vec::with_capacity(rows * spec.n);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..spec.samples_per_class {
        for (class, mean) in spec.cluster_means.iter().enumerate() {
            for &mu in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(mu + spec.cluster_scale * noise);
            }
            labels.push(ClassLabel::new(class));
        }
    }
    let splits = Splits::shuffled(rows, spec.splits, derive_seed(spec.seed, 0x5B1_17))?;
    LabeledDataset::new(features, spec.n, labels, spec.m, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_class() {
        let spec = SyntheticSpec::origin_attractor(3, 4, 100, 6.0, 1.0, 1).unwrap();
        let ds = gen_synthetic_clusters(&spec).unwrap();
        assert_eq!(ds.len(), 300);
        for c in 0..3 {
            assert_eq!(ds.labels().iter().filter(|l| l.index() == c).count(), 100);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::default_benchmark(7);
        assert_eq!(
            gen_synthetic_clusters(&spec).unwrap(),
            gen_synthetic_clusters(&spec).unwrap()
        );
        let other = SyntheticSpec::default_benchmark(8);
        assert_ne!(
            gen_synthetic_clusters(&spec).unwrap(),
            gen_synthetic_clusters(&other).unwrap()
        );
    }

    #[test]
    fn cluster_geometry() {
        let spec = SyntheticSpec::origin_attractor(4, 16, 1, 6.0, 1.0, 3).unwrap();
        assert!(spec.cluster_means[0].iter().all(|&v| v == 0.0));
        for mean in &spec.cluster_means[1..] {
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticSpec::default_benchmark(1);
        spec.cluster_means[0][0] = 1.0;
        assert!(spec.validate().is_err());

        let mut spec = SyntheticSpec::default_benchmark(1);
        spec.cluster_means[2] = spec.cluster_means[1].clone();
        assert!(spec.validate().is_err());

        let mut spec = SyntheticSpec::default_benchmark(1);
        spec.cluster_scale = 0.0;
        assert!(spec.validate().is_err());
    }
}
