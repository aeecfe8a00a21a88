//! Desk-scale classifiers and datasets.
//!
//! A [`DeskModel`] is the frozen base classifier: a per-feature standardizer
//! followed by either a single affine layer (softmax regression) or a
//! one-hidden-layer ReLU network. Both are trained by full-batch Adam on
//! ground-truth cross-entropy.

mod csv_data;
mod dataset;
mod synthetic;

pub use csv_data::{load_csv_dataset, CsvSchema};
pub use dataset::{LabeledDataset, Split, SplitFractions, Splits};
pub use synthetic::{gen_synthetic_clusters, SyntheticSpec};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ablation::{apply_ablation_into, sample_mask_bernoulli, AblationPolicy};
use crate::calib::{softmax_into, LogitVector};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub steps: usize,
    /// Hidden width for [`ModelKind::Mlp`]; ignored otherwise.
    pub hidden_width: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 500,
            hidden_width: 32,
            seed: 0,
        }
    }
}

/// Affine layer with `weights` stored inputs x outputs, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (xi, row) in x.iter().zip(self.weights.chunks_exact(self.outputs)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Frozen base classifier. Inputs are standardized with the stored mean and
/// scale before the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskModel {
    kind: ModelKind,
    n_features: usize,
    n_classes: usize,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    layers: Vec<DenseLayer>,
}

impl DeskModel {
    /// Softmax regression `logits = w^T x~ + b` with `w` given n x m row-major.
    pub fn softmax_regression(
        weights: Vec<f64>,
        bias: Vec<f64>,
        input_mean: Vec<f64>,
        input_scale: Vec<f64>,
    ) -> Result<Self> {
        let n = input_mean.len();
        let m = bias.len();
        let model = Self {
            kind: ModelKind::SoftmaxRegression,
            n_features: n,
            n_classes: m,
            input_mean,
            input_scale,
            layers: vec![DenseLayer {
                inputs: n,
                outputs: m,
                weights,
                bias,
            }],
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_features == 0 {
            return Err(Error::contract("model needs >= 2 classes and >= 1 feature"));
        }
        if self.input_mean.len() != self.n_features || self.input_scale.len() != self.n_features {
            return Err(Error::contract(
                "standardizer length does not match feature count",
            ));
        }
        if self
            .input_scale
            .iter()
            .any(|s| !(*s > 0.0) || !s.is_finite())
        {
            return Err(Error::contract("standardizer scale must be positive"));
        }
        let expected_layers = match self.kind {
            ModelKind::SoftmaxRegression => 1,
            ModelKind::Mlp => 2,
        };
        if self.layers.len() != expected_layers {
            return Err(Error::contract(format!(
                "{:?} needs {expected_layers} layers",
                self.kind
            )));
        }
        let mut width = self.n_features;
        for layer in &self.layers {
            if layer.inputs != width
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::contract("inconsistent layer dimensions"));
            }
            width = layer.outputs;
        }
        if width != self.n_classes {
            return Err(Error::contract(
                "last layer width does not match class count",
            ));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_mean(&self) -> &[f64] {
        &self.input_mean
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    /// Forward pass into `out` (length `n_classes`). `x` is in raw feature units.
    pub fn logits_into(&self, x: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        scratch.standardized.clear();
        scratch.standardized.extend(
            x.iter()
                .zip(&self.input_mean)
                .zip(&self.input_scale)
                .map(|((v, mu), s)| (v - mu) / s),
        );
        self.forward_standardized(&scratch.standardized, out, &mut scratch.hidden);
    }

    fn forward_standardized(&self, x: &[f64], out: &mut [f64], hidden: &mut Vec<f64>) {
        match self.kind {
            ModelKind::SoftmaxRegression => self.layers[0].forward(x, out),
            ModelKind::Mlp => {
                hidden.resize(self.layers[0].outputs, 0.0);
                self.layers[0].forward(x, hidden);
                hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                self.layers[1].forward(hidden, out);
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<LogitVector> {
        if x.len() != self.n_features {
            return Err(Error::contract(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.n_classes];
        self.logits_into(x, &mut out, &mut Scratch::default());
        LogitVector::new(out)
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            theta.extend_from_slice(&l.weights);
            theta.extend_from_slice(&l.bias);
        }
        theta
    }

    fn load_flat(&mut self, theta: &[f64]) {
        let mut offset = 0;
        for l in &mut self.layers {
            let wl = l.weights.len();
            l.weights.copy_from_slice(&theta[offset..offset + wl]);
            offset += wl;
            let bl = l.bias.len();
            l.bias.copy_from_slice(&theta[offset..offset + bl]);
            offset += bl;
        }
    }
}

/// Reusable buffers for [`DeskModel::logits_into`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    standardized: Vec<f64>,
    hidden: Vec<f64>,
}

/// Forward pass of the frozen model on raw features.
pub fn model_logits(model: &DeskModel, x: &[f64]) -> Result<LogitVector> {
    model.logits(x)
}

/// Standardized copies of the rows used for training, with their labels.
struct Batch {
    x: Vec<f64>,
    y: Vec<usize>,
}

fn init_model(data: &LabeledDataset, kind: ModelKind, hp: &TrainParams) -> Result<DeskModel> {
    let n = data.n_features();
    let m = data.n_classes();
    let input_mean = data.feature_means().to_vec();
    let input_scale = data
        .column_stds(Split::Train)
        .into_iter()
        .map(|s| if s > 1e-12 { s } else { 1.0 })
        .collect();
    let layers = match kind {
        ModelKind::SoftmaxRegression => vec![DenseLayer::zeros(n, m)],
        ModelKind::Mlp => {
            let h = hp.hidden_width;
            if h == 0 {
                return Err(Error::contract("MLP hidden width must be >= 1"));
            }
            let mut rng = seeded(hp.seed);
            let mut first = DenseLayer::zeros(n, h);
            let std1 = (2.0 / n as f64).sqrt();
            first
                .weights
                .iter_mut()
                .for_each(|w| *w = std1 * rng.sample::<f64, _>(StandardNormal));
            let mut second = DenseLayer::zeros(h, m);
            let std2 = (1.0 / h as f64).sqrt();
            second
                .weights
                .iter_mut()
                .for_each(|w| *w = std2 * rng.sample::<f64, _>(StandardNormal));
            vec![first, second]
        }
    };
    let model = DeskModel {
        kind,
        n_features: n,
        n_classes: m,
        input_mean,
        input_scale,
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// Mean ground-truth cross-entropy over the batch; gradient written to `grad`
/// in the [`DeskModel::flatten`] layout.
fn loss_and_gradient(model: &DeskModel, batch: &Batch, grad: &mut [f64]) -> f64 {
    let n = model.n_features;
    let m = model.n_classes;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut logits = vec![0.0; m];
    let mut probs = vec![0.0; m];
    let mut hidden = Vec::new();
    let mut total = 0.0;

    for (x, &y) in batch.x.chunks_exact(n).zip(&batch.y) {
        model.forward_standardized(x, &mut logits, &mut hidden);
        total += crate::calib::cross_entropy_raw(&logits, y);
        softmax_into(&logits, &mut probs);
        probs[y] -= 1.0;
        let r = &probs;
        match model.kind {
            ModelKind::SoftmaxRegression => {
                let (gw, gb) = grad.split_at_mut(n * m);
                for (xi, row) in x.iter().zip(gw.chunks_exact_mut(m)) {
                    for (g, rj) in row.iter_mut().zip(r) {
                        *g += xi * rj;
                    }
                }
                for (g, rj) in gb.iter_mut().zip(r) {
                    *g += rj;
                }
            }
            ModelKind::Mlp => {
                let first = &model.layers[0];
                let second = &model.layers[1];
                let h = first.outputs;
                let off2 = first.num_params();
                {
                    let (gw2, gb2) = grad[off2..].split_at_mut(h * m);
                    for (hi, row) in hidden.iter().zip(gw2.chunks_exact_mut(m)) {
                        if *hi == 0.0 {
                            continue;
                        }
                        for (g, rj) in row.iter_mut().zip(r) {
                            *g += hi * rj;
                        }
                    }
                    for (g, rj) in gb2.iter_mut().zip(r) {
                        *g += rj;
                    }
                }
                // back through the ReLU: hidden == 0 exactly where it was clipped
                let dh: Vec<f64> = second
                    .weights
                    .chunks_exact(m)
                    .zip(&hidden)
                    .map(|(row, hi)| {
                        if *hi > 0.0 {
                            row.iter().zip(r).map(|(w, rj)| w * rj).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let (gw1, gb1) = grad[..off2].split_at_mut(n * h);
                for (xi, row) in x.iter().zip(gw1.chunks_exact_mut(h)) {
                    if *xi == 0.0 {
                        continue;
                    }
                    for (g, d) in row.iter_mut().zip(&dh) {
                        *g += xi * d;
                    }
                }
                for (g, d) in gb1.iter_mut().zip(&dh) {
                    *g += d;
                }
            }
        }
    }
    let inv = 1.0 / batch.y.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    total * inv
}

fn standardize_into(model: &DeskModel, x: &[f64], out: &mut Vec<f64>) {
    out.extend(
        x.iter()
            .zip(&model.input_mean)
            .zip(&model.input_scale)
            .map(|((v, mu), s)| (v - mu) / s),
    );
}

fn train_loop(
    mut model: DeskModel,
    hp: &TrainParams,
    mut next_batch: impl FnMut(&DeskModel, &mut Batch),
) -> Result<DeskModel> {
    if !(hp.learning_rate > 0.0) || hp.steps == 0 {
        return Err(Error::contract(
            "training needs learning_rate > 0 and steps >= 1",
        ));
    }
    let mut theta = model.flatten();
    let mut grad = vec![0.0; theta.len()];
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: hp.learning_rate,
            ..Default::default()
        },
        theta.len(),
    );
    let mut batch = Batch {
        x: Vec::new(),
        y: Vec::new(),
    };
    for step in 0..hp.steps {
        next_batch(&model, &mut batch);
        let loss = loss_and_gradient(&model, &batch, &mut grad);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        adam.step(&mut theta, &grad);
        model.load_flat(&theta);
    }
    Ok(model)
}

/// Trains a classifier on the train split by full-batch Adam on ground-truth
/// cross-entropy. Deterministic given `hp.seed`.
pub fn train_model(data: &LabeledDataset, kind: ModelKind, hp: &TrainParams) -> Result<DeskModel> {
    let model = init_model(data, kind, hp)?;
    let rows = data.split(Split::Train);
    let mut fixed = Batch {
        x: Vec::with_capacity(rows.len() * data.n_features()),
        y: Vec::new(),
    };
    for &r in rows {
        standardize_into(&model, data.row(r), &mut fixed.x);
        fixed.y.push(data.label(r).index());
    }
    let mut fixed = Some(fixed);
    train_loop(model, hp, |_, batch| {
        if let Some(b) = fixed.take() {
            *batch = b;
        }
    })
}

/// The retrain baseline: every step sees each train input once clean and
/// once with a fresh Bernoulli(`mask_prob`) mask imputed by `policy`.
pub fn retrain_on_ablations<R: Rng>(
    data: &LabeledDataset,
    kind: ModelKind,
    hp: &TrainParams,
    policy: &AblationPolicy,
    mask_prob: f64,
    rng: &mut R,
) -> Result<DeskModel> {
    let model = init_model(data, kind, hp)?;
    let n = data.n_features();
    policy.validate_for(n)?;
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::contract(format!(
            "mask probability {mask_prob} outside [0, 1]"
        )));
    }
    let rows = data.split(Split::Train).to_vec();
    let units = policy.num_units(n);
    let mut ablated = vec![0.0; n];
    let mut failure = None;
    let model = train_loop(model, hp, |model, batch| {
        batch.x.clear();
        batch.y.clear();
        for &r in &rows {
            let x = data.row(r);
            standardize_into(model, x, &mut batch.x);
            batch.y.push(data.label(r).index());
            let mask = match sample_mask_bernoulli(units, mask_prob, rng) {
                Ok(mask) => policy.expand(&mask, n),
                Err(e) => {
                    failure.get_or_insert(e);
                    continue;
                }
            };
            apply_ablation_into(x, &mask, policy, &mut ablated);
            standardize_into(model, &ablated, &mut batch.x);
            batch.y.push(data.label(r).index());
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}
