//! Perturbation-based attributions over the mask units of a [`Predictor`].
//!
//! All three explainers play the same coalition game: the value of a set of
//! kept units is the probability of the input's clean predicted class when
//! every other unit is ablated. The class is fixed once, before any
//! perturbation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::FeatureMask;
use crate::calib::ClassLabel;
use crate::error::{Error, Result};
use crate::metrics::{rank_desc, Predictor};
use crate::rng::seeded;

/// Largest unit count [`exact_shapley`] will enumerate.
pub const EXACT_SHAPLEY_MAX_UNITS: usize = 12;

/// Per-unit importance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributionVector(Vec<f64>);

impl AttributionVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::domain(format!("attribution {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub num_samples: usize,
    /// Probability that LIME drops a unit from a perturbation.
    pub mask_prob: f64,
    /// LIME kernel width; `None` means `0.75 * sqrt(n)`.
    pub kernel_width: Option<f64>,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            mask_prob: 0.5,
            kernel_width: None,
            ridge_lambda: 1e-3,
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.num_samples < n + 2 {
            return Err(Error::contract(format!(
                "num_samples = {} is below n + 2 = {}",
                self.num_samples,
                n + 2
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::contract(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if let Some(w) = self.kernel_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::contract(format!(
                    "kernel_width must be positive, got {w}"
                )));
            }
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::contract(format!(
                "ridge_lambda must be >= 0, got {}",
                self.ridge_lambda
            )));
        }
        Ok(())
    }

    pub fn kernel_width_for(&self, n: usize) -> f64 {
        self.kernel_width.unwrap_or(0.75 * (n as f64).sqrt())
    }
}

/// The coalition game of one input.
struct Game<'a, P: Predictor + ?Sized> {
    pipe: &'a P,
    x: &'a [f64],
    class: ClassLabel,
    n: usize,
}

impl<'a, P: Predictor + ?Sized> Game<'a, P> {
    fn new(pipe: &'a P, x: &'a [f64]) -> Result<Self> {
        let class = pipe.predict_clean(x)?.argmax();
        Ok(Self {
            pipe,
            x,
            class,
            n: pipe.num_units(),
        })
    }

    /// Value of the coalition marked `true` in `keep`.
    fn value(&self, keep: &[bool]) -> Result<f64> {
        let mask = FeatureMask::new(keep.iter().map(|k| !k).collect());
        Ok(self.pipe.predict_masked(self.x, &mask)?.prob(self.class))
    }
}

/// Weighted least squares `min sum w (y - X beta)^2 + beta' D beta` with `D`
/// diagonal, through the normal equations.
fn weighted_ridge(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    weights: &[f64],
    penalty: &[f64],
) -> Result<DVector<f64>> {
    let mut scaled = design.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(weights) {
        row *= w;
    }
    let mut gram = design.transpose() * &scaled;
    for (i, &p) in penalty.iter().enumerate() {
        gram[(i, i)] += p;
    }
    let rhs = scaled.transpose() * targets;
    let solution = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Explainer("singular regression; draw more samples".into()))?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explainer(
            "regression produced non-finite coefficients".into(),
        ));
    }
    Ok(solution)
}

/// LIME-style local surrogate: ridge regression of the clean class's
/// probability on keep-bits, weighted by an exponential kernel on the
/// normalized Hamming distance to the unperturbed input. The unperturbed
/// input is always the first sample.
pub fn lime_attribute<P: Predictor + ?Sized>(
    pipe: &P,
    x: &[f64],
    cfg: &ExplainerConfig,
) -> Result<AttributionVector> {
    let game = Game::new(pipe, x)?;
    let n = game.n;
    cfg.validate_for(n)?;
    let width = cfg.kernel_width_for(n);
    let mut rng = seeded(cfg.seed);

    let rows = cfg.num_samples;
    let mut design = DMatrix::zeros(rows, n + 1);
    let mut targets = DVector::zeros(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut keep = vec![true; n];
    for r in 0..rows {
        if r > 0 {
            for k in keep.iter_mut() {
                *k = !rng.random_bool(cfg.mask_prob);
            }
        }
        design[(r, 0)] = 1.0;
        for (j, &k) in keep.iter().enumerate() {
            design[(r, j + 1)] = f64::from(u8::from(k));
        }
        targets[r] = game.value(&keep)?;
        let distance = keep.iter().filter(|&&k| !k).count() as f64 / n as f64;
        weights.push((-(distance * distance) / (width * width)).exp());
    }
    let mut penalty = vec![cfg.ridge_lambda; n + 1];
    penalty[0] = 0.0;
    let beta = weighted_ridge(&design, &targets, &weights, &penalty)?;
    AttributionVector::new(beta.iter().skip(1).copied().collect())
}

/// `n choose k` as a float.
fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Calls `visit` with every keep-vector of exactly `size` ones, in
/// lexicographic order of the chosen index sets.
fn for_each_subset(
    n: usize,
    size: usize,
    mut visit: impl FnMut(&[bool]) -> Result<()>,
) -> Result<()> {
    let mut idx: Vec<usize> = (0..size).collect();
    let mut keep = vec![false; n];
    loop {
        keep.iter_mut().for_each(|k| *k = false);
        for &i in &idx {
            keep[i] = true;
        }
        visit(&keep)?;
        // advance to the next combination
        let mut i = size;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if idx[i] < n - size + i {
                idx[i] += 1;
                for j in i + 1..size {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// KernelSHAP-style estimate. Coalition sizes are visited from the outside
/// in (size `s` together with `n - s`); a size is enumerated completely
/// while the budget covers its share of the Shapley kernel mass, and the
/// remaining mass is spread over randomly drawn coalitions of the remaining
/// sizes. The efficiency constraint is imposed exactly by eliminating the
/// last unit's coefficient.
pub fn kernelshap_attribute<P: Predictor + ?Sized>(
    pipe: &P,
    x: &[f64],
    cfg: &ExplainerConfig,
) -> Result<AttributionVector> {
    let game = Game::new(pipe, x)?;
    let n = game.n;
    if n < 2 {
        return Err(Error::contract("KernelSHAP needs at least 2 units"));
    }
    cfg.validate_for(n)?;
    let full = game.value(&vec![true; n])?;
    let empty = game.value(&vec![false; n])?;
    let gap = full - empty;

    // (keep-vector, kernel weight); the map merges repeated draws
    let mut samples: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    let num_sizes = n / 2; // sizes 1..=n/2, each paired with its complement
    let mut size_mass: Vec<f64> = (1..=num_sizes)
        .map(|s| {
            let mass = (n - 1) as f64 / (s * (n - s)) as f64;
            if 2 * s == n {
                mass
            } else {
                2.0 * mass
            }
        })
        .collect();
    let total: f64 = size_mass.iter().sum();
    size_mass.iter_mut().for_each(|m| *m /= total);

    let mut budget = cfg.num_samples as f64;
    let mut mass_left = 1.0;
    let mut first_sampled = num_sizes;
    for (i, &mass) in size_mass.iter().enumerate() {
        let s = i + 1;
        let paired = 2 * s != n;
        let count = binomial(n, s) * if paired { 2.0 } else { 1.0 };
        if budget * mass / mass_left < count - 1e-8 {
            first_sampled = i;
            break;
        }
        let per_subset = mass / count;
        for_each_subset(n, s, |keep| {
            samples.insert(keep.to_vec(), per_subset);
            if paired {
                samples.insert(keep.iter().map(|k| !k).collect(), per_subset);
            }
            Ok(())
        })?;
        budget -= count;
        mass_left -= mass;
    }

    if first_sampled < num_sizes && budget >= 1.0 {
        let mut rng = seeded(cfg.seed);
        let remaining = &size_mass[first_sampled..];
        let remaining_total: f64 = remaining.iter().sum();
        let mut drawn: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
        let mut draws = 0usize;
        while (draws as f64) < budget {
            let mut u = rng.random::<f64>() * remaining_total;
            let mut pick = remaining.len() - 1;
            for (j, &m) in remaining.iter().enumerate() {
                if u < m {
                    pick = j;
                    break;
                }
                u -= m;
            }
            let s = first_sampled + pick + 1;
            let mut keep = vec![false; n];
            for i in sample(&mut rng, n, s) {
                keep[i] = true;
            }
            let paired = 2 * s != n;
            if paired {
                *drawn.entry(keep.iter().map(|k| !k).collect()).or_default() += 1.0;
                draws += 1;
            }
            *drawn.entry(keep).or_default() += 1.0;
            draws += 1;
        }
        let scale = mass_left / draws as f64;
        for (keep, count) in drawn {
            samples.insert(keep, count * scale);
        }
    }

    if samples.len() < n - 1 {
        return Err(Error::Explainer(
            "too few distinct coalitions; draw more samples".into(),
        ));
    }
    // y - z_last * gap = sum_{j < last} (z_j - z_last) phi_j
    let rows = samples.len();
    let mut design = DMatrix::zeros(rows, n - 1);
    let mut targets = DVector::zeros(rows);
    let mut weights = Vec::with_capacity(rows);
    for (r, (keep, &w)) in samples.iter().enumerate() {
        let last = f64::from(u8::from(keep[n - 1]));
        for j in 0..n - 1 {
            design[(r, j)] = f64::from(u8::from(keep[j])) - last;
        }
        targets[r] = game.value(keep)? - empty - last * gap;
        weights.push(w);
    }
    let reduced = weighted_ridge(&design, &targets, &weights, &vec![0.0; n - 1])?;
    let mut phi: Vec<f64> = reduced.iter().copied().collect();
    phi.push(gap - phi.iter().sum::<f64>());
    AttributionVector::new(phi)
}

/// Exact Shapley values of the coalition game by enumerating all `2^n`
/// coalitions.
pub fn exact_shapley<P: Predictor + ?Sized>(pipe: &P, x: &[f64]) -> Result<AttributionVector> {
    let game = Game::new(pipe, x)?;
    let n = game.n;
    if n > EXACT_SHAPLEY_MAX_UNITS {
        return Err(Error::Capacity(format!(
            "exact Shapley enumeration is limited to {EXACT_SHAPLEY_MAX_UNITS} units, got {n}"
        )));
    }
    let coalitions = 1usize << n;
    let mut values = Vec::with_capacity(coalitions);
    let mut keep = vec![false; n];
    for bits in 0..coalitions {
        for (i, k) in keep.iter_mut().enumerate() {
            *k = bits >> i & 1 == 1;
        }
        values.push(game.value(&keep)?);
    }
    // weight[s] = s! (n - s - 1)! / n!
    let weight: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s)))
        .collect();
    let mut phi = vec![0.0; n];
    for (bits, &v) in values.iter().enumerate() {
        let size = bits.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                *p += weight[size] * (values[bits | 1 << i] - v);
            }
        }
    }
    AttributionVector::new(phi)
}

/// Indices of the `k` largest scores in descending order, ties to the
/// lower index.
pub fn top_k_rank(alpha: &AttributionVector, k: usize) -> Result<Vec<usize>> {
    if k > alpha.len() {
        return Err(Error::contract(format!(
            "k = {k} exceeds {} scores",
            alpha.len()
        )));
    }
    let mut order = rank_desc(alpha.as_slice());
    order.truncate(k);
    Ok(order)
}
