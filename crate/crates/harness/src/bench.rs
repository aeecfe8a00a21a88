//! The method comparison: one base model, seven ways of coping with
//! ablated inputs, all evaluated on the same test rows with the same masks.

use std::time::Instant;

use serde::Serialize;

use misscal_core::ablation::{build_pair_dataset, build_pairs, AblationPolicy, MaskScheme};
use misscal_core::calib::{CalibratorParams, Parametrization};
use misscal_core::explain::{kernelshap_attribute, lime_attribute, AttributionVector};
use misscal_core::fit::{fit_calibrator, fit_ensemble, Calibrator, PairedLogitSample};
use misscal_core::metrics::{
    accuracy_vs_rate, sensitivity, sufficiency, BiasReport, PredictablePipeline, Predictor,
};
use misscal_core::models::{retrain_on_ablations, train_model, DeskModel, LabeledDataset, Split};
use misscal_core::rng::{derive_seed, seeded};
use misscal_core::Error as CoreError;

use crate::config::{stream, ExperimentConfig, ExplainerKind, Method};
use crate::error::{HarnessError, Result, StageExt};

/// Everything shared by the methods of one run: data, the frozen base model
/// and the calibration pairs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: LabeledDataset,
    pub base: DeskModel,
    /// Fixed-rate pairs per grid rate, keyed by the realized rate.
    pub rate_buckets: Vec<(f64, Vec<PairedLogitSample>)>,
    /// Pairs with every unit dropped independently at `mixed_mask_prob`.
    pub mixed_pairs: Vec<PairedLogitSample>,
}

/// Builds the dataset, trains the base model and generates calibration pairs
/// on the calibration split.
pub fn prepare(cfg: &ExperimentConfig, base_dir: &std::path::Path) -> Result<Prepared> {
    let data = cfg.dataset.load(cfg.seed, base_dir)?;
    let base = train_model(&data, cfg.model.kind, &cfg.train_params(stream::MODEL))
        .stage("base model training")?;
    let rows = data.split(Split::Calibration).to_vec();
    if rows.is_empty() {
        return Err(HarnessError::Stage {
            stage: "calibration pairs",
            source: CoreError::Contract("calibration split is empty".into()),
        });
    }
    let policy = &cfg.ablation.policy;
    let per_input = cfg.ablation.ablations_per_input;

    let mut rate_buckets = Vec::with_capacity(cfg.ablation.rates.len());
    for (i, &rate) in cfg.ablation.rates.rates().iter().enumerate() {
        let mut rng = seeded(derive_seed(
            derive_seed(cfg.seed, stream::RATE_PAIRS),
            i as u64,
        ));
        let pairs = build_pair_dataset(&base, &data, &rows, rate, policy, per_input, &mut rng)
            .stage("calibration pairs")?;
        rate_buckets.push((pairs[0].ablation_rate, pairs));
    }
    let mut rng = seeded(derive_seed(cfg.seed, stream::MIXED_PAIRS));
    let mixed_pairs = build_pairs(
        &base,
        &data,
        &rows,
        MaskScheme::Bernoulli(cfg.ablation.mixed_mask_prob),
        policy,
        per_input,
        &mut rng,
    )
    .stage("calibration pairs")?;
    Ok(Prepared {
        data,
        base,
        rate_buckets,
        mixed_pairs,
    })
}

/// The pipeline a method deploys.
pub fn build_pipeline(
    method: Method,
    prepared: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<PredictablePipeline> {
    let policy = cfg.ablation.policy.clone();
    let fit = cfg.fit_config();
    let single = |kind: Parametrization, stage: &'static str| -> Result<PredictablePipeline> {
        let fitted = fit_calibrator(
            &prepared.mixed_pairs,
            &fit.clone().with_parametrization(kind),
        )
        .stage(stage)?;
        PredictablePipeline::new(
            prepared.base.clone(),
            Some(Calibrator::Single(fitted.params)),
            policy.clone(),
        )
        .stage(stage)
    };
    match method {
        Method::Base => {
            PredictablePipeline::base(prepared.base.clone(), policy).stage("Base pipeline")
        }
        Method::Replace => {
            let mean = AblationPolicy::mean(prepared.data.feature_means().to_vec())
                .with_group_size(policy.group_size);
            PredictablePipeline::base(prepared.base.clone(), mean).stage("Replace pipeline")
        }
        Method::Retrain => {
            let mut rng = seeded(derive_seed(cfg.seed, stream::RETRAIN));
            let model = retrain_on_ablations(
                &prepared.data,
                cfg.model.kind,
                &cfg.train_params(stream::MODEL),
                &policy,
                cfg.ablation.mixed_mask_prob,
                &mut rng,
            )
            .stage("Retrain training")?;
            PredictablePipeline::base(model, policy).stage("Retrain pipeline")
        }
        Method::TempCal => single(Parametrization::Temperature, "TempCal fit"),
        Method::PlattCal => single(Parametrization::Diagonal, "PlattCal fit"),
        Method::MCalUnconditioned => single(Parametrization::Dense, "MCalUnconditioned fit"),
        Method::MCalConditioned => {
            let ensemble = fit_ensemble(
                &prepared.rate_buckets,
                None,
                &fit.with_parametrization(Parametrization::Dense),
            )
            .stage("MCalConditioned fit")?;
            PredictablePipeline::new(
                prepared.base.clone(),
                Some(Calibrator::Ensemble(ensemble)),
                policy,
            )
            .stage("MCalConditioned fit")
        }
    }
}

/// The base model with an identity calibrator attached.
pub fn identity_pipeline(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<PredictablePipeline> {
    let m = prepared.base.n_classes();
    PredictablePipeline::new(
        prepared.base.clone(),
        Some(Calibrator::Single(CalibratorParams::identity(
            m,
            Parametrization::Dense,
        ))),
        cfg.ablation.policy.clone(),
    )
    .stage("identity pipeline")
}

/// Mean faithfulness of one explainer on one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessRow {
    pub method: Method,
    pub explainer: ExplainerKind,
    pub k: usize,
    pub inputs: usize,
    pub mean_sufficiency: f64,
    pub mean_sensitivity: f64,
}

pub fn explain_with(
    kind: ExplainerKind,
    pipe: &PredictablePipeline,
    x: &[f64],
    settings: &misscal_core::explain::ExplainerConfig,
) -> misscal_core::Result<AttributionVector> {
    match kind {
        ExplainerKind::Lime => lime_attribute(pipe, x, settings),
        ExplainerKind::KernelShap => kernelshap_attribute(pipe, x, settings),
    }
}

/// Sufficiency and sensitivity at `k = round(k_fraction * units)`, averaged
/// over the first `num_inputs` test rows. Input `i` is explained with the
/// same explainer seed for every method.
pub fn faithfulness(
    method: Method,
    pipe: &PredictablePipeline,
    data: &LabeledDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<FaithfulnessRow>> {
    let rows: Vec<usize> = data
        .split(Split::Test)
        .iter()
        .copied()
        .take(cfg.explainer.num_inputs)
        .collect();
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let k = cfg.explainer.k_for(pipe.num_units());
    let mut out = Vec::with_capacity(cfg.explainer.explainers.len());
    for &kind in &cfg.explainer.explainers {
        let (mut suff, mut sens) = (0.0, 0.0);
        for (i, &r) in rows.iter().enumerate() {
            let x = data.row(r);
            let alpha = explain_with(kind, pipe, x, &cfg.explainer_settings(i as u64))
                .stage("explanation")?;
            suff += sufficiency(pipe, x, alpha.as_slice(), k).stage("sufficiency")?;
            sens += sensitivity(pipe, x, alpha.as_slice(), k).stage("sensitivity")?;
        }
        let count = rows.len() as f64;
        out.push(FaithfulnessRow {
            method,
            explainer: kind,
            k,
            inputs: rows.len(),
            mean_sufficiency: suff / count,
            mean_sensitivity: sens / count,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub curve: BiasReport,
    pub faithfulness: Vec<FaithfulnessRow>,
}

impl MethodResult {
    pub fn mean_sufficiency(&self) -> Option<f64> {
        mean(self.faithfulness.iter().map(|f| f.mean_sufficiency))
    }

    pub fn mean_sensitivity(&self) -> Option<f64> {
        mean(self.faithfulness.iter().map(|f| f.mean_sensitivity))
    }

    pub fn faithfulness_for(&self, kind: ExplainerKind) -> Option<&FaithfulnessRow> {
        self.faithfulness.iter().find(|f| f.explainer == kind)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub config_hash: String,
    pub results: Vec<MethodResult>,
    /// Seconds per stage, in execution order. Not part of the CSV outputs.
    pub timings: Vec<(String, f64)>,
}

impl BenchmarkReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    /// Per-rate rows followed by one `mean` row per method. Faithfulness
    /// columns are filled on the mean rows only.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "rate",
            "bias_nats",
            "accuracy",
            "mean_sufficiency",
            "mean_sensitivity",
        ])?;
        for r in &self.results {
            for p in &r.curve.per_rate {
                w.write_record([
                    r.method.as_str(),
                    &p.rate.to_string(),
                    &p.bias_nats.to_string(),
                    &p.accuracy.to_string(),
                    "",
                    "",
                ])?;
            }
        }
        for r in &self.results {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.method.as_str(),
                "mean",
                &r.curve.mean_bias.to_string(),
                &r.curve.mean_accuracy().to_string(),
                &opt(r.mean_sufficiency()),
                &opt(r.mean_sensitivity()),
            ])?;
        }
        finish(w)
    }

    pub fn faithfulness_csv(&self) -> Result<String> {
        let rows: Vec<FaithfulnessRow> = self
            .results
            .iter()
            .flat_map(|r| r.faithfulness.clone())
            .collect();
        faithfulness_csv(&rows)
    }
}

pub fn faithfulness_csv(rows: &[FaithfulnessRow]) -> Result<String> {
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "explainer",
            "k",
            "inputs",
            "mean_sufficiency",
            "mean_sensitivity",
        ])?;
        for f in rows {
            w.write_record([
                f.method.as_str(),
                f.explainer.as_str(),
                &f.k.to_string(),
                &f.inputs.to_string(),
                &f.mean_sufficiency.to_string(),
                &f.mean_sensitivity.to_string(),
            ])?;
        }
        finish(w)
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Evaluates one pipeline over the configured grid with the shared
/// evaluation seed.
pub fn evaluate_pipeline(
    pipe: &PredictablePipeline,
    data: &LabeledDataset,
    cfg: &ExperimentConfig,
) -> Result<BiasReport> {
    let rows = data.split(Split::Test).to_vec();
    accuracy_vs_rate(
        pipe,
        data,
        &rows,
        cfg.ablation.rates.rates(),
        cfg.ablation.eval_ablations_per_input,
        derive_seed(cfg.seed, stream::EVAL),
    )
    .stage("evaluation")
}

/// Runs every configured method. The base model and calibration pairs are
/// built once; every method is evaluated on the test split with the same
/// mask seeds.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    base_dir: &std::path::Path,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let start = Instant::now();
    let prepared = prepare(cfg, base_dir)?;
    timings.push(("prepare".to_string(), start.elapsed().as_secs_f64()));
    run_benchmark_prepared(cfg, &prepared, timings)
}

/// [`run_benchmark`] on an already prepared run.
pub fn run_benchmark_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    mut timings: Vec<(String, f64)>,
) -> Result<BenchmarkReport> {
    let mut results = Vec::with_capacity(cfg.methods.len());
    let mut methods = cfg.methods.clone();
    methods.sort();
    for method in methods {
        let start = Instant::now();
        let pipe = build_pipeline(method, prepared, cfg)?;
        let curve = evaluate_pipeline(&pipe, &prepared.data, cfg)?;
        let faithfulness = faithfulness(method, &pipe, &prepared.data, cfg)?;
        timings.push((method.as_str().to_string(), start.elapsed().as_secs_f64()));
        results.push(MethodResult {
            method,
            curve,
            faithfulness,
        });
    }
    Ok(BenchmarkReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        results,
        timings,
    })
}
