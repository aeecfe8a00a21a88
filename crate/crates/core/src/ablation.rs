//! Feature masks, imputation policies and paired clean/ablated logit datasets.
//!
//! Masks are sampled over *units*. With the default group size of 1 a unit is
//! a single feature; larger group sizes make one mask bit cover a contiguous
//! block of features (patch-style ablation). The ablation rate is always the
//! fraction of units removed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::LogitVector;
use crate::error::{Error, Result};
use crate::fit::PairedLogitSample;
use crate::models::{DeskModel, LabeledDataset, Scratch};

/// `true` marks a removed unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureMask {
    ablated: Vec<bool>,
}

impl FeatureMask {
    pub fn new(ablated: Vec<bool>) -> Self {
        Self { ablated }
    }

    pub fn none(n: usize) -> Self {
        Self {
            ablated: vec![false; n],
        }
    }

    pub fn all(n: usize) -> Self {
        Self {
            ablated: vec![true; n],
        }
    }

    /// Mask with exactly the listed indices ablated.
    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut ablated = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::contract(format!(
                    "mask index {i} out of range for {n} units"
                )));
            }
            ablated[i] = true;
        }
        Ok(Self { ablated })
    }

    pub fn len(&self) -> usize {
        self.ablated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ablated.is_empty()
    }

    pub fn is_ablated(&self, i: usize) -> bool {
        self.ablated[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.ablated
    }

    pub fn count(&self) -> usize {
        self.ablated.iter().filter(|&&a| a).count()
    }

    /// Fraction of units ablated, `k / n`.
    pub fn rate(&self) -> f64 {
        if self.ablated.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.ablated.len() as f64
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            ablated: self.ablated.iter().map(|a| !a).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeKind {
    ZeroImpute,
    MeanImpute,
    CustomBaseline,
}

/// What replaces an ablated feature, and how features are grouped into mask
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPolicy {
    pub kind: ImputeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_means: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub group_size: usize,
}

fn one() -> usize {
    1
}

impl AblationPolicy {
    pub fn zero() -> Self {
        Self {
            kind: ImputeKind::ZeroImpute,
            baseline: None,
            feature_means: None,
            group_size: 1,
        }
    }

    pub fn mean(feature_means: Vec<f64>) -> Self {
        Self {
            kind: ImputeKind::MeanImpute,
            baseline: None,
            feature_means: Some(feature_means),
            group_size: 1,
        }
    }

    pub fn custom(baseline: Vec<f64>) -> Self {
        Self {
            kind: ImputeKind::CustomBaseline,
            baseline: Some(baseline),
            feature_means: None,
            group_size: 1,
        }
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    /// Checks the policy against an input with `n` features.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::contract("group_size must be >= 1"));
        }
        let check = |v: &Option<Vec<f64>>, what: &str| match v {
            Some(v) if v.len() == n => Ok(()),
            Some(v) => Err(Error::contract(format!(
                "{what} has {} entries, input has {n} features",
                v.len()
            ))),
            None => Err(Error::contract(format!("{:?} requires {what}", self.kind))),
        };
        match self.kind {
            ImputeKind::ZeroImpute => Ok(()),
            ImputeKind::MeanImpute => check(&self.feature_means, "feature_means"),
            ImputeKind::CustomBaseline => check(&self.baseline, "baseline"),
        }
    }

    /// Number of mask units for an input with `n` features.
    pub fn num_units(&self, n: usize) -> usize {
        n.div_ceil(self.group_size.max(1))
    }

    /// Expands a unit mask to a feature mask of length `n`.
    pub fn expand(&self, units: &FeatureMask, n: usize) -> FeatureMask {
        if self.group_size <= 1 {
            return units.clone();
        }
        let ablated = (0..n)
            .map(|i| units.is_ablated(i / self.group_size))
            .collect();
        FeatureMask { ablated }
    }

    #[inline]
    fn replacement(&self, i: usize) -> f64 {
        match self.kind {
            ImputeKind::ZeroImpute => 0.0,
            ImputeKind::MeanImpute => self.feature_means.as_ref().map_or(0.0, |m| m[i]),
            ImputeKind::CustomBaseline => self.baseline.as_ref().map_or(0.0, |b| b[i]),
        }
    }
}

/// Sorted, distinct ablation rates in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AblationRateGrid {
    rates: Vec<f64>,
}

impl AblationRateGrid {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::contract("ablation rates must lie in [0, 1]"));
        }
        if rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(
                "ablation rates must be sorted and distinct",
            ));
        }
        Ok(Self { rates })
    }

    /// `{0/n, 1/n, ..., (n-1)/n}`.
    pub fn fractions(n: usize) -> Self {
        Self {
            rates: (0..n).map(|k| k as f64 / n as f64).collect(),
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

impl TryFrom<Vec<f64>> for AblationRateGrid {
    type Error = Error;

    fn try_from(rates: Vec<f64>) -> Result<Self> {
        Self::new(rates)
    }
}

impl From<AblationRateGrid> for Vec<f64> {
    fn from(grid: AblationRateGrid) -> Self {
        grid.rates
    }
}

/// Number of units ablated for a requested rate: `round(rate * n)`.
pub fn quantize_rate(rate: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!(
            "ablation rate {rate} outside [0, 1]"
        )));
    }
    Ok(((rate * n as f64).round() as usize).min(n))
}

/// Exactly `k` of `n` units ablated, uniform over all k-subsets (partial
/// Fisher-Yates shuffle).
pub fn sample_mask_fixed<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<FeatureMask> {
    if k > n {
        return Err(Error::contract(format!("cannot ablate {k} of {n} units")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut ablated = vec![false; n];
    for i in 0..k {
        let j = rng.random_range(i..n);
        order.swap(i, j);
        ablated[order[i]] = true;
    }
    Ok(FeatureMask { ablated })
}

/// Each unit ablated independently with probability `p`.
pub fn sample_mask_bernoulli<R: Rng + ?Sized>(
    n: usize,
    p: f64,
    rng: &mut R,
) -> Result<FeatureMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!(
            "ablation probability {p} outside [0, 1]"
        )));
    }
    Ok(FeatureMask {
        ablated: (0..n).map(|_| rng.random_bool(p)).collect(),
    })
}

/// Writes `x` with masked coordinates replaced per `policy` into `out`.
/// `mask` is feature-level (already expanded). Lengths are not checked.
#[inline]
pub fn apply_ablation_into(
    x: &[f64],
    mask: &FeatureMask,
    policy: &AblationPolicy,
    out: &mut [f64],
) {
    for (i, ((o, &v), &a)) in out.iter_mut().zip(x).zip(&mask.ablated).enumerate() {
        *o = if a { policy.replacement(i) } else { v };
    }
}

/// `x` with the features selected by a feature-level `mask` replaced per
/// `policy`. Unmasked coordinates are copied bit-for-bit.
pub fn apply_ablation(x: &[f64], mask: &FeatureMask, policy: &AblationPolicy) -> Result<Vec<f64>> {
    if mask.len() != x.len() {
        return Err(Error::contract(format!(
            "mask has {} entries, input has {}",
            mask.len(),
            x.len()
        )));
    }
    policy.validate_for(x.len())?;
    let mut out = vec![0.0; x.len()];
    apply_ablation_into(x, mask, policy, &mut out);
    Ok(out)
}

/// How ablated copies are drawn for a pair dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskScheme {
    /// Exactly `round(rate * units)` units per copy.
    FixedRate(f64),
    /// Every unit independently with this probability.
    Bernoulli(f64),
}

/// Runs `model` on clean rows and `ablations_per_input` ablated copies of
/// each. Output order is row order, then copy order; the clean logits are
/// computed once per row. Each sample records its realized rate `k / units`.
pub fn build_pairs<R: Rng + ?Sized>(
    model: &DeskModel,
    data: &LabeledDataset,
    rows: &[usize],
    scheme: MaskScheme,
    policy: &AblationPolicy,
    ablations_per_input: usize,
    rng: &mut R,
) -> Result<Vec<PairedLogitSample>> {
    let n = data.n_features();
    if model.n_features() != n {
        return Err(Error::contract(format!(
            "model expects {} features, dataset has {n}",
            model.n_features()
        )));
    }
    policy.validate_for(n)?;
    let units = policy.num_units(n);
    let fixed_k = match scheme {
        MaskScheme::FixedRate(rate) => Some(quantize_rate(rate, units)?),
        MaskScheme::Bernoulli(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!(
                    "ablation probability {p} outside [0, 1]"
                )));
            }
            None
        }
    };

    let m = model.n_classes();
    let mut scratch = Scratch::default();
    let mut ablated_x = vec![0.0; n];
    let mut samples = Vec::with_capacity(rows.len() * ablations_per_input);
    for &r in rows {
        let x = data.row(r);
        let mut clean = vec![0.0; m];
        model.logits_into(x, &mut clean, &mut scratch);
        let clean = LogitVector::new(clean)?;
        for _ in 0..ablations_per_input {
            let unit_mask = match (scheme, fixed_k) {
                (_, Some(k)) => sample_mask_fixed(units, k, rng)?,
                (MaskScheme::Bernoulli(p), None) => sample_mask_bernoulli(units, p, rng)?,
                (MaskScheme::FixedRate(_), None) => unreachable!("fixed rates always quantize"),
            };
            let mask = policy.expand(&unit_mask, n);
            apply_ablation_into(x, &mask, policy, &mut ablated_x);
            let mut ablated = vec![0.0; m];
            model.logits_into(&ablated_x, &mut ablated, &mut scratch);
            let sample = PairedLogitSample::new(
                clean.clone(),
                LogitVector::new(ablated)?,
                unit_mask.rate(),
            )?
            .with_label(data.label(r));
            samples.push(sample);
        }
    }
    Ok(samples)
}

/// Pairs at a fixed ablation rate (quantized to `round(rate * units) / units`).
pub fn build_pair_dataset<R: Rng + ?Sized>(
    model: &DeskModel,
    data: &LabeledDataset,
    rows: &[usize],
    rate: f64,
    policy: &AblationPolicy,
    ablations_per_input: usize,
    rng: &mut R,
) -> Result<Vec<PairedLogitSample>> {
    build_pairs(
        model,
        data,
        rows,
        MaskScheme::FixedRate(rate),
        policy,
        ablations_per_input,
        rng,
    )
}
