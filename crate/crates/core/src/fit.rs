//! Fitting calibrators on paired clean/ablated logits.
//!
//! The objective is the mean cross-entropy between the calibrated logits of
//! an ablated input and the base model's one-hot prediction on the clean
//! input, plus an optional ridge penalty pulling `(W, b)` toward the
//! identity map. It is convex in the calibrator parameters for every
//! parametrization, so full-batch Adam from any start reaches the same
//! optimal objective value.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calib::{
    argmax, exp_nonpositive, ln_positive, CalibratorParams, ClassLabel, LogitVector,
    Parametrization,
};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;

/// Inverse-temperature bounds enforced while fitting.
pub const INV_TEMPERATURE_MIN: f64 = 1e-6;
pub const INV_TEMPERATURE_MAX: f64 = 1e6;

/// One clean input's logits paired with the logits of an ablated copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedLogitSample {
    pub clean_logits: LogitVector,
    pub ablated_logits: LogitVector,
    pub ablation_rate: f64,
    /// Ground truth, used for accuracy reporting only. Never a fitting target.
    pub clean_label: Option<ClassLabel>,
}

impl PairedLogitSample {
    pub fn new(
        clean_logits: LogitVector,
        ablated_logits: LogitVector,
        ablation_rate: f64,
    ) -> Result<Self> {
        if clean_logits.len() != ablated_logits.len() {
            return Err(Error::contract("clean and ablated logits differ in length"));
        }
        if !(0.0..=1.0).contains(&ablation_rate) {
            return Err(Error::contract(format!(
                "ablation rate {ablation_rate} outside [0, 1]"
            )));
        }
        Ok(Self {
            clean_logits,
            ablated_logits,
            ablation_rate,
            clean_label: None,
        })
    }

    pub fn with_label(mut self, label: ClassLabel) -> Self {
        self.clean_label = Some(label);
        self
    }

    /// The fitting target: the base model's argmax on the clean input.
    pub fn target(&self) -> ClassLabel {
        ClassLabel::new(argmax(self.clean_logits.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of `||W - I||_F^2 + ||b||^2`.
    pub l2_lambda: f64,
    pub parametrization: Parametrization,
    pub seed: u64,
    /// Standard deviation of the Gaussian perturbation added to the identity
    /// start. Zero (the default) starts exactly at `W = I, b = 0` and makes
    /// `seed` irrelevant.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2_lambda: 0.0,
            parametrization: Parametrization::Dense,
            seed: 0,
            init_jitter: 0.0,
        }
    }
}

impl FitConfig {
    pub fn with_parametrization(mut self, kind: Parametrization) -> Self {
        self.parametrization = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::contract(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::contract("steps must be >= 1"));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::contract(format!(
                "l2_lambda must be >= 0, got {}",
                self.l2_lambda
            )));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::contract(format!(
                "init_jitter must be >= 0, got {}",
                self.init_jitter
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Gradient of the objective, shaped like the parameters it differentiates.
/// `bias` is all zeros for the temperature parametrization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub kind: Parametrization,
    pub m: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGradient {
    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Result of [`fit_calibrator`].
#[derive(Debug, Clone)]
pub struct FittedCalibrator {
    pub params: CalibratorParams,
    /// Objective evaluated before each of the `steps` updates; entry 0 is the
    /// objective at the starting point.
    pub loss_trace: Vec<f64>,
    /// Objective at the returned parameters.
    pub final_objective: f64,
}

/// Pairs per block in the inner loop.
const BLOCK: usize = 64;

/// Paired data laid out for the inner loop: blocks of [`BLOCK`] pairs, each
/// stored class-major (`m` runs of `BLOCK` logits) so that per-class
/// operations run across pairs. The last block is zero-padded.
struct Prepared {
    m: usize,
    len: usize,
    blocks: Vec<f64>,
    targets: Vec<usize>,
}

impl Prepared {
    fn new(data: &[PairedLogitSample], m: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("calibration data is empty"));
        }
        let num_blocks = data.len().div_ceil(BLOCK);
        let mut blocks = vec![0.0; num_blocks * BLOCK * m];
        let mut targets = Vec::with_capacity(data.len());
        for (i, s) in data.iter().enumerate() {
            if s.clean_logits.len() != m || s.ablated_logits.len() != m {
                return Err(Error::contract(format!(
                    "sample {i} has {} classes, calibrator has {m}",
                    s.ablated_logits.len()
                )));
            }
            let base = (i / BLOCK) * BLOCK * m + i % BLOCK;
            for (c, &v) in s.ablated_logits.as_slice().iter().enumerate() {
                blocks[base + c * BLOCK] = v;
            }
            targets.push(s.target().index());
        }
        Ok(Self {
            m,
            len: data.len(),
            blocks,
            targets,
        })
    }

    fn len(&self) -> usize {
        self.len
    }
}

/// Dot product of two block columns with sixteen independent accumulators
/// (a fixed summation order the compiler can vectorize).
#[inline(always)]
fn dot(a: &[f64; BLOCK], b: &[f64; BLOCK]) -> f64 {
    let mut acc = [0.0; 16];
    for (ca, cb) in a.as_chunks::<16>().0.iter().zip(b.as_chunks::<16>().0) {
        for ((s, x), y) in acc.iter_mut().zip(ca).zip(cb) {
            *s += x * y;
        }
    }
    fold16(acc)
}

#[inline(always)]
fn sum(a: &[f64; BLOCK]) -> f64 {
    let mut acc = [0.0; 16];
    for c in a.as_chunks::<16>().0 {
        for (s, x) in acc.iter_mut().zip(c) {
            *s += x;
        }
    }
    fold16(acc)
}

#[inline(always)]
fn fold16(acc: [f64; 16]) -> f64 {
    let mut half = [0.0; 8];
    for k in 0..8 {
        half[k] = acc[k] + acc[k + 8];
    }
    ((half[0] + half[4]) + (half[2] + half[6])) + ((half[1] + half[5]) + (half[3] + half[7]))
}

fn l2_penalty(p: &CalibratorParams) -> f64 {
    let m = p.m();
    let w = p.weights();
    let wdist = match p.kind() {
        Parametrization::Dense => (0..m * m)
            .map(|k| {
                let target = if k / m == k % m { 1.0 } else { 0.0 };
                (w[k] - target).powi(2)
            })
            .sum::<f64>(),
        Parametrization::Diagonal => w.iter().map(|d| (d - 1.0).powi(2)).sum(),
        Parametrization::Temperature => m as f64 * (w[0] - 1.0).powi(2),
    };
    wdist + p.bias().iter().map(|b| b * b).sum::<f64>()
}

/// Objective and gradient in one pass. The gradient is written in the free
/// parameter layout of [`CalibratorParams::to_free`].
fn objective_and_gradient(
    p: &CalibratorParams,
    data: &Prepared,
    l2_lambda: f64,
    grad: &mut [f64],
) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            return unsafe { objective_and_gradient_avx512(p, data, l2_lambda, grad) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { objective_and_gradient_avx2(p, data, l2_lambda, grad) };
        }
    }
    objective_and_gradient_body(p, data, l2_lambda, grad)
}

/// The same code compiled with wider vectors. Rust never contracts
/// multiply-adds on its own, so both builds produce identical bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn objective_and_gradient_avx2(
    p: &CalibratorParams,
    data: &Prepared,
    l2_lambda: f64,
    grad: &mut [f64],
) -> f64 {
    objective_and_gradient_body(p, data, l2_lambda, grad)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn objective_and_gradient_avx512(
    p: &CalibratorParams,
    data: &Prepared,
    l2_lambda: f64,
    grad: &mut [f64],
) -> f64 {
    objective_and_gradient_body(p, data, l2_lambda, grad)
}

#[inline(always)]
fn objective_and_gradient_body(
    p: &CalibratorParams,
    data: &Prepared,
    l2_lambda: f64,
    grad: &mut [f64],
) -> f64 {
    let m = data.m;
    let n = data.len();
    let kind = p.kind();
    let w = p.weights();
    let b = p.bias();
    grad.iter_mut().for_each(|g| *g = 0.0);

    let mut logits = vec![0.0; BLOCK * m];
    let mut row_max = [0.0; BLOCK];
    let mut row_sum = [0.0; BLOCK];
    let mut log_sum = [0.0; BLOCK];
    let mut total = 0.0;
    for (zs, ts) in data
        .blocks
        .chunks_exact(BLOCK * m)
        .zip(data.targets.chunks(BLOCK))
    {
        let rows = ts.len();
        let z = |c: usize| -> &[f64; BLOCK] { zs[c * BLOCK..(c + 1) * BLOCK].try_into().unwrap() };

        // calibrated logits, class-major
        for (i, out) in logits.chunks_exact_mut(BLOCK).enumerate() {
            match kind {
                Parametrization::Dense => {
                    out.fill(b[i]);
                    for j in 0..m {
                        let wij = w[i * m + j];
                        for (o, &v) in out.iter_mut().zip(z(j)) {
                            *o += wij * v;
                        }
                    }
                }
                Parametrization::Diagonal => {
                    for (o, &v) in out.iter_mut().zip(z(i)) {
                        *o = w[i] * v + b[i];
                    }
                }
                Parametrization::Temperature => {
                    for (o, &v) in out.iter_mut().zip(z(i)) {
                        *o = w[0] * v;
                    }
                }
            }
        }

        row_max.fill(f64::NEG_INFINITY);
        for class in logits.chunks_exact(BLOCK) {
            for (mx, &v) in row_max.iter_mut().zip(class) {
                *mx = mx.max(v);
            }
        }
        for class in logits.chunks_exact_mut(BLOCK) {
            for (v, &mx) in class.iter_mut().zip(&row_max) {
                *v -= mx;
            }
        }
        for (p, &t) in ts.iter().enumerate() {
            total -= logits[t * BLOCK + p];
        }
        for v in logits.iter_mut() {
            *v = exp_nonpositive(*v);
        }
        row_sum.fill(0.0);
        for class in logits.chunks_exact(BLOCK) {
            for (s, &v) in row_sum.iter_mut().zip(class) {
                *s += v;
            }
        }
        for (l, &s) in log_sum.iter_mut().zip(&row_sum) {
            *l = ln_positive(s);
        }
        total += log_sum[..rows].iter().sum::<f64>();
        for s in row_sum.iter_mut() {
            *s = 1.0 / *s;
        }
        // residual r = softmax - onehot, in place; padding rows get r = 0
        for class in logits.chunks_exact_mut(BLOCK) {
            for (v, &inv) in class.iter_mut().zip(&row_sum) {
                *v *= inv;
            }
            class[rows..].fill(0.0);
        }
        for (p, &t) in ts.iter().enumerate() {
            logits[t * BLOCK + p] -= 1.0;
        }

        let r =
            |c: usize| -> &[f64; BLOCK] { logits[c * BLOCK..(c + 1) * BLOCK].try_into().unwrap() };
        match kind {
            Parametrization::Dense => {
                for i in 0..m {
                    for j in 0..m {
                        grad[i * m + j] += dot(r(i), z(j));
                    }
                    grad[m * m + i] += sum(r(i));
                }
            }
            Parametrization::Diagonal => {
                for i in 0..m {
                    grad[i] += dot(r(i), z(i));
                    grad[m + i] += sum(r(i));
                }
            }
            Parametrization::Temperature => {
                grad[0] += (0..m).map(|i| dot(r(i), z(i))).sum::<f64>();
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    let mut objective = total * inv_n;

    if l2_lambda > 0.0 {
        objective += l2_lambda * l2_penalty(p);
        let two_l = 2.0 * l2_lambda;
        match kind {
            Parametrization::Dense => {
                for k in 0..m * m {
                    let target = if k / m == k % m { 1.0 } else { 0.0 };
                    grad[k] += two_l * (w[k] - target);
                }
                for i in 0..m {
                    grad[m * m + i] += two_l * b[i];
                }
            }
            Parametrization::Diagonal => {
                for i in 0..m {
                    grad[i] += two_l * (w[i] - 1.0);
                    grad[m + i] += two_l * b[i];
                }
            }
            Parametrization::Temperature => {
                grad[0] += two_l * m as f64 * (w[0] - 1.0);
            }
        }
    }
    objective
}

fn check_l2(l2_lambda: f64) -> Result<()> {
    if !(l2_lambda >= 0.0) {
        return Err(Error::contract(format!(
            "l2_lambda must be >= 0, got {l2_lambda}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of calibrated ablated logits against the clean
/// predictions, plus `l2_lambda * (||W - I||_F^2 + ||b||^2)`.
pub fn objective(p: &CalibratorParams, data: &[PairedLogitSample], l2_lambda: f64) -> Result<f64> {
    check_l2(l2_lambda)?;
    let prepared = Prepared::new(data, p.m())?;
    let mut grad = vec![0.0; p.num_free()];
    Ok(objective_and_gradient(p, &prepared, l2_lambda, &mut grad))
}

/// Exact analytic gradient of [`objective`].
pub fn gradient(
    p: &CalibratorParams,
    data: &[PairedLogitSample],
    l2_lambda: f64,
) -> Result<ParamGradient> {
    check_l2(l2_lambda)?;
    let prepared = Prepared::new(data, p.m())?;
    let mut grad = vec![0.0; p.num_free()];
    objective_and_gradient(p, &prepared, l2_lambda, &mut grad);
    let m = p.m();
    let wl = p.kind().weight_len(m);
    let bias = if p.kind() == Parametrization::Temperature {
        vec![0.0; m]
    } else {
        grad[wl..wl + m].to_vec()
    };
    Ok(ParamGradient {
        kind: p.kind(),
        m,
        weights: grad[..wl].to_vec(),
        bias,
    })
}

/// Identity start, optionally perturbed by `cfg.init_jitter` Gaussian noise
/// drawn from `cfg.seed`.
pub fn initial_params(m: usize, cfg: &FitConfig) -> CalibratorParams {
    let id = CalibratorParams::identity(m, cfg.parametrization);
    if cfg.init_jitter == 0.0 {
        return id;
    }
    let mut rng = seeded(cfg.seed);
    let mut theta = id.to_free();
    for t in theta.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *t += cfg.init_jitter * noise;
    }
    if cfg.parametrization == Parametrization::Temperature {
        theta[0] = theta[0].clamp(INV_TEMPERATURE_MIN, INV_TEMPERATURE_MAX);
    }
    CalibratorParams::from_free_unchecked(m, cfg.parametrization, &theta)
}

/// Fits a calibrator by full-batch Adam, starting from [`initial_params`].
pub fn fit_calibrator(data: &[PairedLogitSample], cfg: &FitConfig) -> Result<FittedCalibrator> {
    let m = data
        .first()
        .ok_or_else(|| Error::contract("calibration data is empty"))?
        .ablated_logits
        .len();
    fit_calibrator_from(initial_params(m, cfg), data, cfg)
}

/// Fits a calibrator by full-batch Adam from an explicit starting point.
/// The parametrization of `init` overrides `cfg.parametrization`.
pub fn fit_calibrator_from(
    init: CalibratorParams,
    data: &[PairedLogitSample],
    cfg: &FitConfig,
) -> Result<FittedCalibrator> {
    cfg.validate()?;
    let m = init.m();
    let kind = init.kind();
    let prepared = Prepared::new(data, m)?;

    let mut theta = init.to_free();
    let mut grad = vec![0.0; theta.len()];
    let mut adam = Adam::new(cfg.adam(), theta.len());
    let mut params = init;
    let mut loss_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let loss = objective_and_gradient(&params, &prepared, cfg.l2_lambda, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        loss_trace.push(loss);
        adam.step(&mut theta, &grad);
        if kind == Parametrization::Temperature {
            theta[0] = theta[0].clamp(INV_TEMPERATURE_MIN, INV_TEMPERATURE_MAX);
        }
        params = CalibratorParams::from_free_unchecked(m, kind, &theta);
    }

    let final_objective = objective_and_gradient(&params, &prepared, cfg.l2_lambda, &mut grad);
    if !final_objective.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_objective,
        });
    }
    params.validate().map_err(|_| Error::Diverged {
        step: cfg.steps,
        loss: final_objective,
    })?;
    Ok(FittedCalibrator {
        params,
        loss_trace,
        final_objective,
    })
}

/// A calibrator fitted at one ablation rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEntry {
    pub rate: f64,
    pub params: CalibratorParams,
}

/// Rate-indexed calibrators, selected at inference by nearest rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorEnsemble {
    entries: Vec<EnsembleEntry>,
    unconditioned: Option<CalibratorParams>,
}

impl CalibratorEnsemble {
    pub fn new(
        mut entries: Vec<EnsembleEntry>,
        unconditioned: Option<CalibratorParams>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        for e in &entries {
            if !(0.0..=1.0).contains(&e.rate) {
                return Err(Error::contract(format!(
                    "ensemble rate {} outside [0, 1]",
                    e.rate
                )));
            }
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].rate >= w[1].rate) {
            return Err(Error::contract(format!(
                "duplicate ensemble rate {}",
                w[1].rate
            )));
        }
        let m = entries
            .first()
            .map(|e| e.params.m())
            .or(unconditioned.as_ref().map(|u| u.m()));
        if let Some(m) = m {
            let mismatch = entries
                .iter()
                .map(|e| &e.params)
                .chain(unconditioned.as_ref())
                .any(|p| p.m() != m);
            if mismatch {
                return Err(Error::contract(
                    "ensemble members disagree on the class count",
                ));
            }
        }
        Ok(Self {
            entries,
            unconditioned,
        })
    }

    pub fn entries(&self) -> &[EnsembleEntry] {
        &self.entries
    }

    pub fn unconditioned(&self) -> Option<&CalibratorParams> {
        self.unconditioned.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn m(&self) -> Option<usize> {
        self.entries
            .first()
            .map(|e| e.params.m())
            .or(self.unconditioned.as_ref().map(|u| u.m()))
    }
}

/// Fits one calibrator per rate bucket, plus an unconditioned member when
/// `unconditioned` data is given.
pub fn fit_ensemble(
    data_by_rate: &[(f64, Vec<PairedLogitSample>)],
    unconditioned: Option<&[PairedLogitSample]>,
    cfg: &FitConfig,
) -> Result<CalibratorEnsemble> {
    if data_by_rate.is_empty() && unconditioned.is_none() {
        return Err(Error::contract("no rate buckets to fit"));
    }
    let mut entries = Vec::with_capacity(data_by_rate.len());
    for (rate, bucket) in data_by_rate {
        if bucket.is_empty() {
            return Err(Error::contract(format!("rate bucket {rate} is empty")));
        }
        let fitted = fit_calibrator(bucket, cfg)?;
        entries.push(EnsembleEntry {
            rate: *rate,
            params: fitted.params,
        });
    }
    let unconditioned = match unconditioned {
        Some(data) => Some(fit_calibrator(data, cfg)?.params),
        None => None,
    };
    CalibratorEnsemble::new(entries, unconditioned)
}

/// Distances closer than this count as ties when selecting a member.
const RATE_TIE_TOL: f64 = 1e-12;

/// The member fitted at the rate closest to `rate`; exact midpoints go to
/// the lower rate. An ensemble with no rate entries falls back to its
/// unconditioned member.
pub fn select_calibrator(ensemble: &CalibratorEnsemble, rate: f64) -> Result<&CalibratorParams> {
    let mut best: Option<(&EnsembleEntry, f64)> = None;
    for e in &ensemble.entries {
        let d = (e.rate - rate).abs();
        match best {
            Some((_, bd)) if d >= bd - RATE_TIE_TOL => {}
            _ => best = Some((e, d)),
        }
    }
    match best {
        Some((e, _)) => Ok(&e.params),
        None => ensemble
            .unconditioned
            .as_ref()
            .ok_or_else(|| Error::contract("cannot select from an empty ensemble")),
    }
}

/// What a pipeline applies to logits: one calibrator for every input, or a
/// rate-conditioned ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Single(CalibratorParams),
    Ensemble(CalibratorEnsemble),
}

impl Calibrator {
    pub fn m(&self) -> Option<usize> {
        match self {
            Calibrator::Single(p) => Some(p.m()),
            Calibrator::Ensemble(e) => e.m(),
        }
    }

    /// The calibrator to apply to an input ablated at `rate`.
    pub fn for_rate(&self, rate: f64) -> Result<&CalibratorParams> {
        match self {
            Calibrator::Single(p) => Ok(p),
            Calibrator::Ensemble(e) => select_calibrator(e, rate),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn pair(clean: &[f64], ablated: &[f64]) -> PairedLogitSample {
        PairedLogitSample::new(lv(clean), lv(ablated), 0.5).unwrap()
    }

    fn random_pairs(m: usize, n: usize, seed: u64) -> Vec<PairedLogitSample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let clean: Vec<f64> = (0..m)
                    .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let ablated: Vec<f64> = clean
                    .iter()
                    .map(|c| 0.5 * c + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                pair(&clean, &ablated)
            })
            .collect()
    }

    #[test]
    fn objective_single_sample() {
        let data = vec![pair(&[10.0, 0.0], &[10.0, 0.0])];
        let id = CalibratorParams::identity(2, Parametrization::Dense);
        let obj = objective(&id, &data, 0.0).unwrap();
        // ln(1 + e^-10)
        assert!((obj - 4.539889921686e-5).abs() < 1e-12, "{obj}");
    }

    #[test]
    fn objective_tends_to_zero_when_saturating_correct_predictions() {
        let same: Vec<_> = random_pairs(3, 50, 1)
            .iter()
            .map(|s| pair(s.clean_logits.as_slice(), s.clean_logits.as_slice()))
            .collect();
        let mut last = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0, 1e4] {
            let p = CalibratorParams::temperature(3, scale).unwrap();
            let obj = objective(&p, &same, 0.0).unwrap();
            assert!(obj < last);
            last = obj;
        }
        assert!(last < 1e-6, "{last}");
    }

    #[test]
    fn objective_rejects_empty_and_mismatched() {
        let id = CalibratorParams::identity(2, Parametrization::Dense);
        assert!(matches!(objective(&id, &[], 0.0), Err(Error::Contract(_))));
        let data = vec![pair(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0])];
        assert!(matches!(
            objective(&id, &data, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn contradictory_targets_cannot_beat_ln2() {
        // Identical ablated logits with opposite clean predictions: any
        // calibrator outputs the same distribution q for both, so the loss is
        // -(ln q0 + ln q1)/2 >= ln 2. Brute-force grid over 2-class params.
        let data = vec![
            pair(&[1.0, 0.0], &[0.3, -0.2]),
            pair(&[0.0, 1.0], &[0.3, -0.2]),
        ];
        let grid: Vec<f64> = (-4..=4).map(|i| i as f64).collect();
        let mut best = f64::INFINITY;
        for &w00 in &grid {
            for &w01 in &grid {
                for &w10 in &grid {
                    for &w11 in &grid {
                        for &b0 in &grid {
                            let p =
                                CalibratorParams::dense(2, vec![w00, w01, w10, w11], vec![b0, 0.0])
                                    .unwrap();
                            best = best.min(objective(&p, &data, 0.0).unwrap());
                        }
                    }
                }
            }
        }
        assert!(best >= 2f64.ln() - 1e-12);
        assert!(
            (best - 2f64.ln()).abs() < 1e-9,
            "grid contains the optimum W z + b = const"
        );
    }

    #[test]
    fn gradient_vanishes_at_saturated_optimum() {
        let data = vec![
            pair(&[1.0, -1.0], &[1.0, -1.0]),
            pair(&[-1.0, 1.0], &[-1.0, 1.0]),
        ];
        let p = CalibratorParams::temperature(2, 30.0).unwrap();
        assert!(gradient(&p, &data, 0.0).unwrap().norm() < 1e-6);
        let p = CalibratorParams::dense(2, vec![30.0, 0.0, 0.0, 30.0], vec![0.0, 0.0]).unwrap();
        assert!(gradient(&p, &data, 0.0).unwrap().norm() < 1e-6);
    }

    #[test]
    fn diagonal_gradient_is_diagonal_of_dense() {
        let data = random_pairs(4, 30, 9);
        let diag = CalibratorParams::diagonal(vec![0.7, 1.3, -0.4, 2.0], vec![0.1, -0.2, 0.3, 0.0])
            .unwrap();
        let dense = CalibratorParams::dense(4, diag.dense_weights(), diag.bias().to_vec()).unwrap();
        for lambda in [0.0, 0.3] {
            let gd = gradient(&diag, &data, lambda).unwrap();
            let gf = gradient(&dense, &data, lambda).unwrap();
            for i in 0..4 {
                assert!((gd.weights[i] - gf.weights[i * 4 + i]).abs() < 1e-12);
            }
            assert_eq!(gd.bias.len(), 4);
            for i in 0..4 {
                assert!((gd.bias[i] - gf.bias[i]).abs() < 1e-12);
            }
        }

        let temp = CalibratorParams::temperature(4, 0.8).unwrap();
        let dense = CalibratorParams::dense(4, temp.dense_weights(), vec![0.0; 4]).unwrap();
        let gt = gradient(&temp, &data, 0.0).unwrap();
        let gf = gradient(&dense, &data, 0.0).unwrap();
        let trace: f64 = (0..4).map(|i| gf.weights[i * 4 + i]).sum();
        assert!((gt.weights[0] - trace).abs() < 1e-12);
    }

    #[test]
    fn fit_descends_from_identity() {
        let data: Vec<_> = random_pairs(3, 40, 3)
            .into_iter()
            .map(|s| pair(s.clean_logits.as_slice(), s.clean_logits.as_slice()))
            .collect();
        let cfg = FitConfig {
            steps: 200,
            ..Default::default()
        };
        let fitted = fit_calibrator(&data, &cfg).unwrap();
        assert_eq!(fitted.loss_trace.len(), 200);
        assert!(fitted.final_objective <= fitted.loss_trace[0]);
    }

    #[test]
    fn permuted_logits_are_undone() {
        // ablated = P clean with a cyclic permutation; a dense calibrator must
        // learn P^-1 (up to scaling) and agree with every clean prediction.
        let mut rng = seeded(11);
        let data: Vec<_> = (0..60)
            .map(|_| {
                let clean: Vec<f64> = (0..3)
                    .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let ablated = vec![clean[1], clean[2], clean[0]];
                pair(&clean, &ablated)
            })
            .collect();
        let fitted = fit_calibrator(&data, &FitConfig::default()).unwrap();
        for s in &data {
            let cal = crate::calib::apply_calibrator(&fitted.params, &s.ablated_logits).unwrap();
            assert_eq!(crate::calib::predict_class(&cal), s.target());
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        // the cross-entropy against class 1 overflows to infinity
        let data = vec![pair(&[0.0, 1.0], &[1.5e308, -1.5e308])];
        let cfg = FitConfig {
            steps: 3,
            ..Default::default()
        };
        match fit_calibrator(&data, &cfg) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn temperature_stays_clamped() {
        // Contradictory data drives 1/T toward zero.
        let data = vec![
            pair(&[1.0, 0.0], &[5.0, -5.0]),
            pair(&[0.0, 1.0], &[5.0, -5.0]),
        ];
        let cfg = FitConfig {
            parametrization: Parametrization::Temperature,
            learning_rate: 0.5,
            steps: 500,
            ..Default::default()
        };
        let fitted = fit_calibrator(&data, &cfg).unwrap();
        let s = fitted.params.weights()[0];
        assert!((INV_TEMPERATURE_MIN..=INV_TEMPERATURE_MAX).contains(&s));
        assert!(s < 0.01);
    }

    #[test]
    fn config_validation() {
        let data = random_pairs(2, 5, 1);
        for cfg in [
            FitConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            FitConfig {
                steps: 0,
                ..Default::default()
            },
            FitConfig {
                l2_lambda: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                fit_calibrator(&data, &cfg),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn ensemble_singleton_matches_direct_fit() {
        let data = random_pairs(3, 30, 5);
        let cfg = FitConfig {
            steps: 300,
            ..Default::default()
        };
        let ens = fit_ensemble(&[(0.5, data.clone())], None, &cfg).unwrap();
        assert_eq!(ens.len(), 1);
        assert_eq!(
            ens.entries()[0].params,
            fit_calibrator(&data, &cfg).unwrap().params
        );
    }

    #[test]
    fn ensemble_sorted_and_order_independent() {
        let cfg = FitConfig {
            steps: 100,
            ..Default::default()
        };
        let mut buckets: Vec<(f64, Vec<PairedLogitSample>)> = (0..10)
            .map(|k| (k as f64 / 10.0, random_pairs(3, 12, k)))
            .collect();
        let forward = fit_ensemble(&buckets, None, &cfg).unwrap();
        assert_eq!(forward.len(), 10);
        assert!(forward.entries().windows(2).all(|w| w[0].rate < w[1].rate));

        buckets.shuffle(&mut seeded(3));
        let shuffled = fit_ensemble(&buckets, None, &cfg).unwrap();
        assert_eq!(forward, shuffled);
    }

    #[test]
    fn ensemble_rejects_empty_bucket_and_duplicates() {
        let cfg = FitConfig {
            steps: 10,
            ..Default::default()
        };
        let err = fit_ensemble(&[(0.3, vec![])], None, &cfg).unwrap_err();
        assert!(err.to_string().contains("0.3"), "{err}");
        let d = random_pairs(2, 3, 1);
        assert!(fit_ensemble(&[(0.2, d.clone()), (0.2, d)], None, &cfg).is_err());
    }

    fn grid_ensemble() -> CalibratorEnsemble {
        let entries = (0..10)
            .map(|k| EnsembleEntry {
                rate: k as f64 / 10.0,
                params: CalibratorParams::temperature(2, 1.0 + k as f64).unwrap(),
            })
            .collect();
        CalibratorEnsemble::new(entries, None).unwrap()
    }

    #[test]
    fn select_examples() {
        let ens = grid_ensemble();
        let rate_of = |q: f64| select_calibrator(&ens, q).unwrap().weights()[0] - 1.0;
        assert_eq!(rate_of(0.33), 3.0);
        assert_eq!(rate_of(0.35), 3.0);
        assert_eq!(rate_of(0.97), 9.0);
        assert_eq!(rate_of(0.0), 0.0);
        assert_eq!(rate_of(0.36), 4.0);
    }

    #[test]
    fn select_from_empty() {
        let empty = CalibratorEnsemble::new(vec![], None).unwrap();
        assert!(matches!(
            select_calibrator(&empty, 0.5),
            Err(Error::Contract(_))
        ));
        let uncond = CalibratorParams::identity(2, Parametrization::Dense);
        let only = CalibratorEnsemble::new(vec![], Some(uncond.clone())).unwrap();
        assert_eq!(select_calibrator(&only, 0.5).unwrap(), &uncond);
    }
}
