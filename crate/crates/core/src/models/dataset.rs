use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calib::ClassLabel;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Which rows of a dataset an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

/// Fractions of rows assigned to the train and calibration splits; the test
/// split gets the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            calibration: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.train > 0.0 && self.calibration >= 0.0 && self.train + self.calibration <= 1.0;
        if !ok {
            return Err(Error::contract(format!(
                "invalid split fractions train = {}, calibration = {}",
                self.train, self.calibration
            )));
        }
        Ok(())
    }
}

/// Disjoint row-index sets covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded shuffle of `0..rows`, cut by `fractions`.
    pub fn shuffled(rows: usize, fractions: SplitFractions, seed: u64) -> Result<Self> {
        fractions.validate()?;
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut seeded(seed));
        let n_train = ((rows as f64 * fractions.train).round() as usize).clamp(1.min(rows), rows);
        let n_cal = ((rows as f64 * fractions.calibration).round() as usize).min(rows - n_train);
        let test = order.split_off(n_train + n_cal);
        let calibration = order.split_off(n_train);
        Ok(Self {
            train: order,
            calibration,
            test,
        })
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Calibration => &self.calibration,
            Split::Test => &self.test,
        }
    }
}

/// Feature table with labels, split assignment and train-split feature means.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    n_features: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<ClassLabel>,
    feature_means: Vec<f64>,
    splits: Splits,
    feature_names: Vec<String>,
}

impl LabeledDataset {
    /// `features` is row-major with `n_features` columns.
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<ClassLabel>,
        n_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::contract("dataset needs at least one feature"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::contract(format!(
                "{} feature values do not fit {} rows of {n_features} features",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("dataset has no rows"));
        }
        if n_classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if let Some(l) = labels.iter().find(|l| l.index() >= n_classes) {
            return Err(Error::contract(format!(
                "label {} out of range for {n_classes} classes",
                l.index()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite feature at row {}, column {}",
                i / n_features,
                i % n_features
            )));
        }
        let rows = labels.len();
        let mut seen = vec![false; rows];
        for &r in splits
            .train
            .iter()
            .chain(&splits.calibration)
            .chain(&splits.test)
        {
            if r >= rows || seen[r] {
                return Err(Error::contract(format!(
                    "split index {r} is out of range or repeated"
                )));
            }
            seen[r] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("splits do not cover every row"));
        }
        if splits.train.is_empty() {
            return Err(Error::contract("train split is empty"));
        }
        let mut ds = Self {
            n_features,
            n_classes,
            features,
            labels,
            feature_means: Vec::new(),
            splits,
            feature_names: (0..n_features).map(|i| format!("f{i}")).collect(),
        };
        ds.feature_means = ds.column_means(Split::Train);
        Ok(ds)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(Error::contract(
                "feature name count does not match feature count",
            ));
        }
        self.feature_names = names;
        Ok(self)
    }

    fn column_means(&self, split: Split) -> Vec<f64> {
        let rows = self.splits.get(split);
        let mut means = vec![0.0; self.n_features];
        for &r in rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let denom = rows.len().max(1) as f64;
        means.iter_mut().for_each(|m| *m /= denom);
        means
    }

    /// Standard deviations over `split` (population form).
    pub fn column_stds(&self, split: Split) -> Vec<f64> {
        let rows = self.splits.get(split);
        let means = self.column_means(split);
        let mut var = vec![0.0; self.n_features];
        for &r in rows {
            for ((v, x), mu) in var.iter_mut().zip(self.row(r)).zip(&means) {
                *v += (x - mu).powi(2);
            }
        }
        let denom = rows.len().max(1) as f64;
        var.iter().map(|v| (v / denom).sqrt()).collect()
    }

    /// Rescales every column with train-split statistics so the train split
    /// has zero mean and unit variance. Constant columns are only centered.
    pub fn standardized(mut self) -> Self {
        let means = self.column_means(Split::Train);
        let stds = self.column_stds(Split::Train);
        let n = self.n_features;
        for row in self.features.chunks_exact_mut(n) {
            for ((x, mu), sd) in row.iter_mut().zip(&means).zip(&stds) {
                let scale = if *sd > 1e-12 { *sd } else { 1.0 };
                *x = (*x - mu) / scale;
            }
        }
        self.feature_means = self.column_means(Split::Train);
        self
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> ClassLabel {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Per-feature means of the train split, in the dataset's feature units.
    pub fn feature_means(&self) -> &[f64] {
        &self.feature_means
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(split)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Copy of this dataset whose splits are replaced. Means are recomputed.
    pub fn with_splits(&self, splits: Splits) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.n_features,
            self.labels.clone(),
            self.n_classes,
            splits,
        )
        .and_then(|d| d.with_feature_names(self.feature_names.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: usize) -> LabeledDataset {
        let features: Vec<f64> = (0..rows * 2).map(|i| i as f64).collect();
        let labels = (0..rows).map(|i| ClassLabel::new(i % 2)).collect();
        let splits = Splits::shuffled(rows, SplitFractions::default(), 3).unwrap();
        LabeledDataset::new(features, 2, labels, 2, splits).unwrap()
    }

    #[test]
    fn splits_are_disjoint_covering_and_reproducible() {
        let a = Splits::shuffled(101, SplitFractions::default(), 42).unwrap();
        let b = Splits::shuffled(101, SplitFractions::default(), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 71);
        assert_eq!(a.calibration.len(), 15);
        assert_eq!(a.test.len(), 15);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.calibration)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_ne!(
            a,
            Splits::shuffled(101, SplitFractions::default(), 43).unwrap()
        );
    }

    #[test]
    fn means_come_from_train_split() {
        let ds = toy(40);
        let train = ds.split(Split::Train);
        let expected: f64 = train.iter().map(|&r| ds.row(r)[0]).sum::<f64>() / train.len() as f64;
        assert!((ds.feature_means()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let ds = toy(50).standardized();
        for m in ds.feature_means() {
            assert!(m.abs() < 1e-12);
        }
        for sd in ds.column_stds(Split::Train) {
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let splits = Splits {
            train: vec![0],
            calibration: vec![],
            test: vec![1],
        };
        let labels = vec![ClassLabel::new(0), ClassLabel::new(1)];
        assert!(
            LabeledDataset::new(vec![1.0, f64::NAN], 1, labels.clone(), 2, splits.clone()).is_err()
        );
        assert!(LabeledDataset::new(
            vec![1.0, 2.0],
            1,
            vec![ClassLabel::new(0), ClassLabel::new(2)],
            2,
            splits.clone()
        )
        .is_err());
        let overlapping = Splits {
            train: vec![0, 1],
            calibration: vec![1],
            test: vec![],
        };
        assert!(LabeledDataset::new(vec![1.0, 2.0], 1, labels.clone(), 2, overlapping).is_err());
        let partial = Splits {
            train: vec![0],
            calibration: vec![],
            test: vec![],
        };
        assert!(LabeledDataset::new(vec![1.0, 2.0], 1, labels, 2, partial).is_err());
    }
}
