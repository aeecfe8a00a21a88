//! Experiment configuration: one JSON document per run.
//!
//! All randomness in a run is derived from the top-level `seed`. Seed fields
//! inside nested sections (`model`, `fit`, `explainer`) are overwritten with
//! derived values before use.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use misscal_core::ablation::{AblationPolicy, AblationRateGrid};
use misscal_core::explain::ExplainerConfig;
use misscal_core::fit::FitConfig;
use misscal_core::models::{
    gen_synthetic_clusters, load_csv_dataset, CsvSchema, LabeledDataset, ModelKind, SplitFractions,
    SyntheticSpec, TrainParams,
};
use misscal_core::rng::derive_seed;

use crate::error::{HarnessError, Result, StageExt};

/// Stream labels for [`derive_seed`]; one per independent source of
/// randomness in a run.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const RETRAIN: u64 = 3;
    pub const RATE_PAIRS: u64 = 4;
    pub const MIXED_PAIRS: u64 = 5;
    pub const FIT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const EXPLAIN: u64 = 8;
    pub const SIMPLEX: u64 = 9;
}

/// Where the rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian clusters with class 0 at the origin.
    Synthetic {
        #[serde(default = "defaults::classes")]
        m: usize,
        #[serde(default = "defaults::features")]
        n: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::cluster_scale")]
        cluster_scale: f64,
        #[serde(default)]
        splits: SplitFractions,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        positive_class: Option<String>,
        #[serde(default)]
        drop_columns: Vec<String>,
        #[serde(default)]
        splits: SplitFractions,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            m: defaults::classes(),
            n: defaults::features(),
            samples_per_class: defaults::samples_per_class(),
            separation: defaults::separation(),
            cluster_scale: defaults::cluster_scale(),
            splits: SplitFractions::default(),
        }
    }
}

mod defaults {
    pub fn classes() -> usize {
        3
    }
    pub fn features() -> usize {
        16
    }
    pub fn samples_per_class() -> usize {
        500
    }
    pub fn separation() -> f64 {
        6.0
    }
    pub fn cluster_scale() -> f64 {
        1.0
    }
}

impl DatasetConfig {
    /// Builds (or loads) the dataset. Relative CSV paths resolve against
    /// `base_dir`.
    pub fn load(&self, seed: u64, base_dir: &Path) -> Result<LabeledDataset> {
        let data_seed = derive_seed(seed, stream::DATA);
        match self {
            DatasetConfig::Synthetic {
                m,
                n,
                samples_per_class,
                separation,
                cluster_scale,
                splits,
            } => {
                let mut spec = SyntheticSpec::origin_attractor(
                    *m,
                    *n,
                    *samples_per_class,
                    *separation,
                    *cluster_scale,
                    data_seed,
                )
                .map_err(|e| HarnessError::Config(format!("dataset: {e}")))?;
                spec.splits = *splits;
                gen_synthetic_clusters(&spec).stage("dataset generation")
            }
            DatasetConfig::Csv {
                path,
                label_column,
                positive_class,
                drop_columns,
                splits,
            } => {
                let schema = CsvSchema {
                    label_column: label_column.clone(),
                    positive_class: positive_class.clone(),
                    drop_columns: drop_columns.clone(),
                    splits: *splits,
                    seed: data_seed,
                };
                load_csv_dataset(&base_dir.join(path), &schema).stage("dataset loading")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(flatten)]
    pub train: TrainParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            train: TrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Evaluation grid; conditioned ensembles get one member per rate.
    pub rates: AblationRateGrid,
    pub policy: AblationPolicy,
    /// Ablated copies per calibration input when building fitting pairs.
    pub ablations_per_input: usize,
    /// Ablated copies per test input when measuring bias and accuracy.
    pub eval_ablations_per_input: usize,
    /// Per-feature drop probability for the single-calibrator baselines'
    /// fitting pairs and for the retrain baseline.
    pub mixed_mask_prob: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rates: AblationRateGrid::fractions(16),
            policy: AblationPolicy::zero(),
            ablations_per_input: 8,
            eval_ablations_per_input: 8,
            mixed_mask_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Lime,
    KernelShap,
}

impl ExplainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExplainerKind::Lime => "lime",
            ExplainerKind::KernelShap => "kernelshap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplanationConfig {
    #[serde(flatten)]
    pub settings: ExplainerConfig,
    pub explainers: Vec<ExplainerKind>,
    /// Test inputs explained per method; zero skips the faithfulness columns.
    pub num_inputs: usize,
    /// `k` for sufficiency and sensitivity as a fraction of the unit count.
    pub k_fraction: f64,
}

impl Default for ExplanationConfig {
    fn default() -> Self {
        Self {
            settings: ExplainerConfig::default(),
            explainers: vec![ExplainerKind::Lime, ExplainerKind::KernelShap],
            num_inputs: 20,
            k_fraction: 0.25,
        }
    }
}

impl ExplanationConfig {
    pub fn k_for(&self, units: usize) -> usize {
        ((self.k_fraction * units as f64).round() as usize).min(units)
    }
}

/// The compared methods, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Base,
    Replace,
    Retrain,
    TempCal,
    PlattCal,
    MCalUnconditioned,
    MCalConditioned,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::Replace,
        Method::Retrain,
        Method::TempCal,
        Method::PlattCal,
        Method::MCalUnconditioned,
        Method::MCalConditioned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "Base",
            Method::Replace => "Replace",
            Method::Retrain => "Retrain",
            Method::TempCal => "TempCal",
            Method::PlattCal => "PlattCal",
            Method::MCalUnconditioned => "MCalUnconditioned",
            Method::MCalConditioned => "MCalConditioned",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Config(format!("unknown method \"{s}\"")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexConfig {
    pub rate: f64,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self { rate: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub fit: FitConfig,
    pub explainer: ExplanationConfig,
    pub methods: Vec<Method>,
    pub simplex: SimplexConfig,
    /// Training-set sizes (in fitting pairs) for the sweep subcommand.
    pub sweep_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            fit: FitConfig::default(),
            explainer: ExplanationConfig::default(),
            methods: Method::ALL.to_vec(),
            simplex: SimplexConfig::default(),
            sweep_sizes: vec![100, 300, 1000],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(HarnessError::Config(what));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return bad("methods are listed more than once".into());
        }
        if self.ablation.rates.is_empty() {
            return bad("ablation.rates is empty".into());
        }
        if self.ablation.ablations_per_input == 0 || self.ablation.eval_ablations_per_input == 0 {
            return bad("ablations per input must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ablation.mixed_mask_prob) {
            return bad(format!(
                "ablation.mixed_mask_prob {} outside [0, 1]",
                self.ablation.mixed_mask_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.explainer.k_fraction) {
            return bad(format!(
                "explainer.k_fraction {} outside [0, 1]",
                self.explainer.k_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.simplex.rate) {
            return bad(format!("simplex.rate {} outside [0, 1]", self.simplex.rate));
        }
        if self.sweep_sizes.iter().any(|&s| s == 0)
            || self.sweep_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("sweep_sizes must be positive and strictly ascending".into());
        }
        self.fit
            .validate()
            .map_err(|e| HarnessError::Config(format!("fit: {e}")))?;
        if let DatasetConfig::Synthetic {
            m,
            n,
            samples_per_class,
            separation,
            cluster_scale,
            ..
        } = &self.dataset
        {
            SyntheticSpec::origin_attractor(
                *m,
                *n,
                *samples_per_class,
                *separation,
                *cluster_scale,
                0,
            )
            .map_err(|e| HarnessError::Config(format!("dataset: {e}")))?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical form: compact JSON with object keys sorted.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub(crate) fn train_params(&self, stream_id: u64) -> TrainParams {
        TrainParams {
            seed: derive_seed(self.seed, stream_id),
            ..self.model.train.clone()
        }
    }

    pub(crate) fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: derive_seed(self.seed, stream::FIT),
            ..self.fit.clone()
        }
    }

    /// Explainer settings for the `input`-th explained row.
    pub fn explainer_settings(&self, input: u64) -> ExplainerConfig {
        ExplainerConfig {
            seed: derive_seed(derive_seed(self.seed, stream::EXPLAIN), input),
            ..self.explainer.settings
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        for text in [
            r#"{"methods": []}"#,
            r#"{"methods": ["Base", "Base"]}"#,
            r#"{"ablation": {"rates": [0.5, 0.25]}}"#,
            r#"{"fit": {"steps": 0}}"#,
            r#"{"sweep_sizes": [10, 5]}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"dataset": {"kind": "synthetic", "m": 1}}"#,
            "not json",
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn method_names_parse() {
        assert_eq!(
            "mcalconditioned".parse::<Method>().unwrap(),
            Method::MCalConditioned
        );
        assert!("Arch".parse::<Method>().is_err());
    }
}
