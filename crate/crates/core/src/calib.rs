//! Numerical primitives: logits, class distributions, the affine calibrator
//! map, argmax classification, cross-entropy and KL divergence.
//!
//! All probability math goes through max-subtracted log-sum-exp. Nothing in
//! this module takes the logarithm of a softmax output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`ClassDistribution`].
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

/// Raw model outputs before the softmax. At least two classes, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::contract(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    /// Wraps values already known to be finite with length >= 2.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2 && values.iter().all(|v| v.is_finite()));
        Self(values)
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("empty class distribution"));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain(format!(
                "probability {i} outside [0, 1]: {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(Error::domain(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        Self(probs)
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

    pub fn prob(&self, class: ClassLabel) -> f64 {
        self.0[class.index()]
    }

    /// Most probable class, ties to the lowest index.
    pub fn argmax(&self) -> ClassLabel {
        ClassLabel(argmax(&self.0))
    }
}

/// A class index. Range checks against the class count happen where the
/// count is known (see [`ClassLabel::checked`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(usize);

impl ClassLabel {
    pub const fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn checked(index: usize, m: usize) -> Result<Self> {
        if index >= m {
            return Err(Error::contract(format!(
                "class index {index} out of range for {m} classes"
            )));
        }
        Ok(Self(index))
    }

    pub const fn index(self) -> usize {
        self.0
    }
}

/// How the calibrator matrix `W` is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// Full `m x m` matrix ("matrix scaling").
    Dense,
    /// Diagonal `W` ("vector scaling").
    Diagonal,
    /// `W = I / T`, stored as the single scalar `1/T`, with `b` fixed at zero.
    Temperature,
}

impl Parametrization {
    /// Number of stored `W` entries for `m` classes.
    pub fn weight_len(self, m: usize) -> usize {
        match self {
            Parametrization::Dense => m * m,
            Parametrization::Diagonal => m,
            Parametrization::Temperature => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Parametrization::Dense => "dense",
            Parametrization::Diagonal => "diagonal",
            Parametrization::Temperature => "temperature",
        }
    }
}

/// Parameters `(W, b)` of the affine calibrator `z -> Wz + b`.
///
/// `weights` holds `W` row-major for [`Parametrization::Dense`], the diagonal
/// for [`Parametrization::Diagonal`] and `[1/T]` for
/// [`Parametrization::Temperature`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorParams {
    m: usize,
    kind: Parametrization,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl CalibratorParams {
    pub fn new(m: usize, kind: Parametrization, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let params = Self {
            m,
            kind,
            weights,
            bias,
        };
        params.validate()?;
        Ok(params)
    }

    /// `W = I`, `b = 0`: reproduces the base model exactly.
    pub fn identity(m: usize, kind: Parametrization) -> Self {
        let weights = match kind {
            Parametrization::Dense => {
                let mut w = vec![0.0; m * m];
                for i in 0..m {
                    w[i * m + i] = 1.0;
                }
                w
            }
            Parametrization::Diagonal => vec![1.0; m],
            Parametrization::Temperature => vec![1.0],
        };
        Self {
            m,
            kind,
            weights,
            bias: vec![0.0; m],
        }
    }

    pub fn dense(m: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Self::new(m, Parametrization::Dense, weights, bias)
    }

    pub fn diagonal(diag: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Self::new(diag.len(), Parametrization::Diagonal, diag, bias)
    }

    pub fn temperature(m: usize, inverse_temperature: f64) -> Result<Self> {
        Self::new(
            m,
            Parametrization::Temperature,
            vec![inverse_temperature],
            vec![0.0; m],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        if m < 2 {
            return Err(Error::contract(format!("calibrator needs m >= 2, got {m}")));
        }
        let expected = self.kind.weight_len(m);
        if self.weights.len() != expected {
            return Err(Error::contract(format!(
                "{} calibrator with m = {m} needs {expected} weight entries, got {}",
                self.kind.as_str(),
                self.weights.len()
            )));
        }
        if self.bias.len() != m {
            return Err(Error::contract(format!(
                "bias has {} entries, expected {m}",
                self.bias.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::domain("calibrator parameters must be finite"));
        }
        if self.kind == Parametrization::Temperature {
            if self.weights[0] <= 0.0 {
                return Err(Error::domain(format!(
                    "inverse temperature must be positive, got {}",
                    self.weights[0]
                )));
            }
            if self.bias.iter().any(|&b| b != 0.0) {
                return Err(Error::contract("temperature calibrator bias must be zero"));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> Parametrization {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `W` as a dense row-major `m x m` matrix regardless of parametrization.
    pub fn dense_weights(&self) -> Vec<f64> {
        let m = self.m;
        match self.kind {
            Parametrization::Dense => self.weights.clone(),
            Parametrization::Diagonal | Parametrization::Temperature => {
                let mut w = vec![0.0; m * m];
                for i in 0..m {
                    w[i * m + i] = self.diag_entry(i);
                }
                w
            }
        }
    }

    fn diag_entry(&self, i: usize) -> f64 {
        match self.kind {
            Parametrization::Dense => self.weights[i * self.m + i],
            Parametrization::Diagonal => self.weights[i],
            Parametrization::Temperature => self.weights[0],
        }
    }

    /// Number of free parameters seen by the optimizer.
    pub fn num_free(&self) -> usize {
        match self.kind {
            Parametrization::Temperature => 1,
            _ => self.weights.len() + self.m,
        }
    }

    /// Free parameters flattened as `[weights..., bias...]` (weights only for
    /// temperature).
    pub fn to_free(&self) -> Vec<f64> {
        let mut theta = self.weights.clone();
        if self.kind != Parametrization::Temperature {
            theta.extend_from_slice(&self.bias);
        }
        theta
    }

    /// Inverse of [`to_free`](Self::to_free). Does not validate.
    pub(crate) fn from_free_unchecked(m: usize, kind: Parametrization, theta: &[f64]) -> Self {
        let wl = kind.weight_len(m);
        let weights = theta[..wl].to_vec();
        let bias = if kind == Parametrization::Temperature {
            vec![0.0; m]
        } else {
            theta[wl..wl + m].to_vec()
        };
        Self {
            m,
            kind,
            weights,
            bias,
        }
    }

    /// Writes `Wz + b` into `out`. Both slices must have length `m`.
    #[inline]
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        let m = self.m;
        debug_assert_eq!(z.len(), m);
        debug_assert_eq!(out.len(), m);
        match self.kind {
            Parametrization::Dense => {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &self.weights[i * m..(i + 1) * m];
                    *o = row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + self.bias[i];
                }
            }
            Parametrization::Diagonal => {
                for i in 0..m {
                    out[i] = self.weights[i] * z[i] + self.bias[i];
                }
            }
            Parametrization::Temperature => {
                let s = self.weights[0];
                for i in 0..m {
                    out[i] = s * z[i];
                }
            }
        }
    }
}

/// Applies the calibrator: `Wz + b` under the active parametrization.
pub fn apply_calibrator(params: &CalibratorParams, z: &LogitVector) -> Result<LogitVector> {
    if params.m() != z.len() {
        return Err(Error::contract(format!(
            "calibrator expects {} logits, got {}",
            params.m(),
            z.len()
        )));
    }
    let mut out = vec![0.0; z.len()];
    params.apply_into(z.as_slice(), &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("calibrated logits overflowed"));
    }
    Ok(LogitVector::from_trusted(out))
}

/// Index of the maximum, ties to the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `exp(x)` for `x <= 0`, accurate to a few ulps; inputs below -708 give
/// `exp(-708)` instead of a subnormal. Branch-free so loops over it vectorize.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    // k = round(x / ln 2), read back from the low mantissa bits
    let shifted = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of exp on |r| <= ln(2) / 2, truncation error below 1e-16
    let mut poly = 1.0 / 479_001_600.0;
    poly = poly * r + 1.0 / 39_916_800.0;
    poly = poly * r + 1.0 / 3_628_800.0;
    poly = poly * r + 1.0 / 362_880.0;
    poly = poly * r + 1.0 / 40_320.0;
    poly = poly * r + 1.0 / 5_040.0;
    poly = poly * r + 1.0 / 720.0;
    poly = poly * r + 1.0 / 120.0;
    poly = poly * r + 1.0 / 24.0;
    poly = poly * r + 1.0 / 6.0;
    poly = poly * r + 0.5;
    poly = poly * r + 1.0;
    poly = poly * r + 1.0;
    let k_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    poly * scale
}

/// Natural log of a positive normal float, accurate to a few ulps.
/// Branch-free so loops over it vectorize.
#[inline(always)]
pub(crate) fn ln_positive(x: f64) -> f64 {
    const SQRT_HALF_BITS: u64 = 0x3FE6_A09E_667F_3BCD;
    // x = 2^e * f with f in [sqrt(1/2), sqrt(2))
    let bits = x.to_bits();
    let shifted = bits.wrapping_sub(SQRT_HALF_BITS);
    let e = shifted as i64 >> 52;
    let f = f64::from_bits(bits.wrapping_sub((e as u64) << 52));
    // ln f = 2 atanh(u), u = (f - 1) / (f + 1), |u| < 0.172
    let u = (f - 1.0) / (f + 1.0);
    let u2 = u * u;
    let mut poly = 1.0 / 23.0;
    poly = poly * u2 + 1.0 / 21.0;
    poly = poly * u2 + 1.0 / 19.0;
    poly = poly * u2 + 1.0 / 17.0;
    poly = poly * u2 + 1.0 / 15.0;
    poly = poly * u2 + 1.0 / 13.0;
    poly = poly * u2 + 1.0 / 11.0;
    poly = poly * u2 + 1.0 / 9.0;
    poly = poly * u2 + 1.0 / 7.0;
    poly = poly * u2 + 1.0 / 5.0;
    poly = poly * u2 + 1.0 / 3.0;
    poly = poly * u2 + 1.0;
    e as f64 * std::f64::consts::LN_2 + 2.0 * u * poly
}

#[inline]
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of a raw slice into `out`, max-subtracted.
#[inline]
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(z: &LogitVector) -> ClassDistribution {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), &mut out);
    ClassDistribution::from_trusted(out)
}

pub fn log_softmax(z: &LogitVector) -> Vec<f64> {
    let lse = log_sum_exp(z.as_slice());
    z.as_slice().iter().map(|v| v - lse).collect()
}

/// Argmax class, ties broken to the lowest index.
pub fn predict_class(z: &LogitVector) -> ClassLabel {
    ClassLabel(argmax(z.as_slice()))
}

pub fn one_hot(class: ClassLabel, m: usize) -> Result<ClassDistribution> {
    ClassLabel::checked(class.index(), m)?;
    let mut probs = vec![0.0; m];
    probs[class.index()] = 1.0;
    Ok(ClassDistribution::from_trusted(probs))
}

/// `-log softmax(z)[target]` in nats, via log-sum-exp.
pub fn cross_entropy(z: &LogitVector, target: ClassLabel) -> Result<f64> {
    ClassLabel::checked(target.index(), z.len())?;
    Ok(cross_entropy_raw(z.as_slice(), target.index()))
}

#[inline]
pub(crate) fn cross_entropy_raw(z: &[f64], target: usize) -> f64 {
    log_sum_exp(z) - z[target]
}

/// `KL(p || q)` in nats after additive smoothing: each distribution becomes
/// `(p + eps) / (1 + m * eps)` before the sum.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution, eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "KL over distributions of different lengths ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::contract(format!(
            "smoothing eps must be >= 0, got {eps}"
        )));
    }
    let norm = 1.0 + p.len() as f64 * eps;
    let mut kl = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        let ps = (pi + eps) / norm;
        let qs = (qi + eps) / norm;
        if ps > 0.0 {
            kl += ps * (ps / qs).ln();
        }
    }
    Ok(kl.max(0.0))
}
