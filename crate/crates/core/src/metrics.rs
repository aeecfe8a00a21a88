//! Missingness bias, accuracy-vs-rate curves, and the sufficiency and
//! sensitivity faithfulness metrics.
//!
//! Every metric sees a model through [`Predictor`], which maps an input and
//! a unit-level ablation mask to a class distribution. [`PredictablePipeline`]
//! is the standard implementation: ablate, run the frozen model, apply the
//! calibrator chosen for the realized ablation rate, softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{
    apply_ablation_into, quantize_rate, sample_mask_fixed, AblationPolicy, FeatureMask,
};
use crate::calib::{argmax, kl_divergence, softmax_into, ClassDistribution, ClassLabel};
use crate::error::{Error, Result};
use crate::fit::Calibrator;
use crate::models::{DeskModel, LabeledDataset, Scratch};
use crate::rng::{derive_seed, seeded};

/// Additive smoothing used for the bias KL unless a caller overrides it.
pub const DEFAULT_KL_EPS: f64 = 1e-9;

/// A classifier that can be queried with some mask units ablated.
pub trait Predictor: Sync {
    /// Length of the masks accepted by [`Predictor::predict_masked`].
    fn num_units(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Class probabilities for `x` with the units selected by `mask` ablated.
    fn predict_masked(&self, x: &[f64], mask: &FeatureMask) -> Result<ClassDistribution>;

    fn predict_clean(&self, x: &[f64]) -> Result<ClassDistribution> {
        self.predict_masked(x, &FeatureMask::none(self.num_units()))
    }
}

/// Frozen model, optional calibrator, and the imputation policy used when
/// features are removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictablePipeline {
    model: DeskModel,
    calibrator: Option<Calibrator>,
    policy: AblationPolicy,
}

impl PredictablePipeline {
    pub fn new(
        model: DeskModel,
        calibrator: Option<Calibrator>,
        policy: AblationPolicy,
    ) -> Result<Self> {
        policy.validate_for(model.n_features())?;
        if let Some(c) = &calibrator {
            match c.m() {
                Some(m) if m == model.n_classes() => {}
                Some(m) => {
                    return Err(Error::contract(format!(
                        "calibrator has {m} classes, model has {}",
                        model.n_classes()
                    )))
                }
                None => return Err(Error::contract("calibrator ensemble is empty")),
            }
        }
        Ok(Self {
            model,
            calibrator,
            policy,
        })
    }

    /// Uncalibrated pipeline.
    pub fn base(model: DeskModel, policy: AblationPolicy) -> Result<Self> {
        Self::new(model, None, policy)
    }

    pub fn model(&self) -> &DeskModel {
        &self.model
    }

    pub fn calibrator(&self) -> Option<&Calibrator> {
        self.calibrator.as_ref()
    }

    pub fn policy(&self) -> &AblationPolicy {
        &self.policy
    }

    /// The uncalibrated model's class on the unablated input.
    pub fn base_class(&self, x: &[f64]) -> Result<ClassLabel> {
        self.check_input(x)?;
        let mut z = vec![0.0; self.model.n_classes()];
        self.model.logits_into(x, &mut z, &mut Scratch::default());
        Ok(ClassLabel::new(argmax(&z)))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.model.n_features() {
            return Err(Error::contract(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.model.n_features()
            )));
        }
        Ok(())
    }
}

impl Predictor for PredictablePipeline {
    fn num_units(&self) -> usize {
        self.policy.num_units(self.model.n_features())
    }

    fn num_classes(&self) -> usize {
        self.model.n_classes()
    }

    fn predict_masked(&self, x: &[f64], mask: &FeatureMask) -> Result<ClassDistribution> {
        self.check_input(x)?;
        let n = self.model.n_features();
        if mask.len() != self.num_units() {
            return Err(Error::contract(format!(
                "mask has {} units, pipeline expects {}",
                mask.len(),
                self.num_units()
            )));
        }
        let m = self.model.n_classes();
        let mut ablated = vec![0.0; n];
        apply_ablation_into(x, &self.policy.expand(mask, n), &self.policy, &mut ablated);
        let mut z = vec![0.0; m];
        self.model
            .logits_into(&ablated, &mut z, &mut Scratch::default());
        if let Some(c) = &self.calibrator {
            let params = c.for_rate(mask.rate())?;
            let mut calibrated = vec![0.0; m];
            params.apply_into(&z, &mut calibrated);
            z = calibrated;
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("logit {i} is not finite")));
        }
        let mut probs = vec![0.0; m];
        softmax_into(&z, &mut probs);
        Ok(ClassDistribution::from_trusted(probs))
    }
}

/// Empirical class frequencies of `preds` over `m` classes.
pub fn class_frequency(preds: &[ClassLabel], m: usize) -> Result<ClassDistribution> {
    if preds.is_empty() {
        return Err(Error::contract(
            "class frequency of an empty prediction list",
        ));
    }
    let mut counts = vec![0usize; m];
    for p in preds {
        ClassLabel::checked(p.index(), m)?;
        counts[p.index()] += 1;
    }
    let total = preds.len() as f64;
    Ok(ClassDistribution::from_trusted(
        counts.into_iter().map(|c| c as f64 / total).collect(),
    ))
}

/// Bias and accuracy at one ablation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate: f64,
    pub bias_nats: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_rate: Vec<RatePoint>,
    pub mean_bias: f64,
}

impl BiasReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.per_rate.iter().map(|p| p.accuracy).sum::<f64>() / self.per_rate.len().max(1) as f64
    }
}

/// Bias and accuracy at `rate`: each row is ablated `ablations_per_input`
/// times with exactly `round(rate * units)` units removed. The reference
/// frequencies are always the base model's predictions on the clean rows.
pub fn evaluate_rate<P, R>(
    pipe: &P,
    reference: &[ClassLabel],
    data: &LabeledDataset,
    rows: &[usize],
    rate: f64,
    ablations_per_input: usize,
    rng: &mut R,
    eps: f64,
) -> Result<RatePoint>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    if rows.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    if ablations_per_input == 0 {
        return Err(Error::contract("ablations_per_input must be >= 1"));
    }
    let m = pipe.num_classes();
    let units = pipe.num_units();
    let k = quantize_rate(rate, units)?;
    let mut preds = Vec::with_capacity(rows.len() * ablations_per_input);
    let mut correct = 0usize;
    for &r in rows {
        let x = data.row(r);
        for _ in 0..ablations_per_input {
            let mask = sample_mask_fixed(units, k, rng)?;
            let class = pipe.predict_masked(x, &mask)?.argmax();
            correct += usize::from(class == data.label(r));
            preds.push(class);
        }
    }
    let ablated = class_frequency(&preds, m)?;
    let clean = class_frequency(reference, m)?;
    Ok(RatePoint {
        rate,
        bias_nats: kl_divergence(&ablated, &clean, eps)?,
        accuracy: correct as f64 / preds.len() as f64,
    })
}

/// Base-model predictions on the clean rows: the fixed anchor for every
/// bias computation.
pub fn reference_classes(
    pipe: &PredictablePipeline,
    data: &LabeledDataset,
    rows: &[usize],
) -> Result<Vec<ClassLabel>> {
    rows.iter().map(|&r| pipe.base_class(data.row(r))).collect()
}

/// Missingness bias in nats: KL between the class frequencies of the
/// pipeline on ablated rows and of the base model on the clean rows.
pub fn missingness_bias<R: Rng + ?Sized>(
    pipe: &PredictablePipeline,
    data: &LabeledDataset,
    rows: &[usize],
    rate: f64,
    ablations_per_input: usize,
    rng: &mut R,
    eps: f64,
) -> Result<f64> {
    let reference = reference_classes(pipe, data, rows)?;
    Ok(evaluate_rate(
        pipe,
        &reference,
        data,
        rows,
        rate,
        ablations_per_input,
        rng,
        eps,
    )?
    .bias_nats)
}

/// Per-rate bias and ground-truth accuracy over `rates`. Rate `i` draws its
/// masks from `seeded(derive_seed(seed, i))`, so each point can be reproduced
/// by a standalone [`missingness_bias`] call.
pub fn accuracy_vs_rate(
    pipe: &PredictablePipeline,
    data: &LabeledDataset,
    rows: &[usize],
    rates: &[f64],
    ablations_per_input: usize,
    seed: u64,
) -> Result<BiasReport> {
    if rates.is_empty() {
        return Err(Error::contract("empty ablation rate grid"));
    }
    let reference = reference_classes(pipe, data, rows)?;
    let per_rate = rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            evaluate_rate(
                pipe,
                &reference,
                data,
                rows,
                rate,
                ablations_per_input,
                &mut rng,
                DEFAULT_KL_EPS,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_bias = per_rate.iter().map(|p| p.bias_nats).sum::<f64>() / per_rate.len() as f64;
    Ok(BiasReport {
        per_rate,
        mean_bias,
    })
}

/// Unit indices ordered by descending score, ties to the lower index.
pub(crate) fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_faithfulness_args<P: Predictor + ?Sized>(
    pipe: &P,
    alpha: &[f64],
    k: usize,
) -> Result<usize> {
    let n = pipe.num_units();
    if alpha.len() != n {
        return Err(Error::contract(format!(
            "attribution has {} entries, pipeline has {n} units",
            alpha.len()
        )));
    }
    if k > n {
        return Err(Error::contract(format!("k = {k} exceeds {n} units")));
    }
    Ok(n)
}

/// Drop in the clean predicted class's probability when only the `k`
/// highest-scored units are kept.
pub fn sufficiency<P: Predictor + ?Sized>(
    pipe: &P,
    x: &[f64],
    alpha: &[f64],
    k: usize,
) -> Result<f64> {
    let n = check_faithfulness_args(pipe, alpha, k)?;
    let clean = pipe.predict_clean(x)?;
    let class = clean.argmax();
    let mut ablated = vec![true; n];
    for &i in &rank_desc(alpha)[..k] {
        ablated[i] = false;
    }
    let kept = pipe.predict_masked(x, &FeatureMask::new(ablated))?;
    Ok(clean.prob(class) - kept.prob(class))
}

/// Drop in the clean predicted class's probability when the `k`
/// highest-scored units are removed.
pub fn sensitivity<P: Predictor + ?Sized>(
    pipe: &P,
    x: &[f64],
    alpha: &[f64],
    k: usize,
) -> Result<f64> {
    let n = check_faithfulness_args(pipe, alpha, k)?;
    let clean = pipe.predict_clean(x)?;
    let class = clean.argmax();
    let mut ablated = vec![false; n];
    for &i in &rank_desc(alpha)[..k] {
        ablated[i] = true;
    }
    let removed = pipe.predict_masked(x, &FeatureMask::new(ablated))?;
    Ok(clean.prob(class) - removed.prob(class))
}
