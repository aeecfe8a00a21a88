//! Training-set size sweep for the single dense calibrator.

use std::time::Instant;

use misscal_core::calib::Parametrization;
use misscal_core::fit::{fit_calibrator, Calibrator};
use misscal_core::metrics::PredictablePipeline;
use misscal_core::Error as CoreError;

use crate::bench::{evaluate_pipeline, finish, prepare, Prepared};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result, StageExt};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub final_loss: f64,
    /// Mean accuracy over the evaluation grid.
    pub test_accuracy: f64,
    pub mean_bias: f64,
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Deterministic columns only.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["size", "final_loss", "test_accuracy", "mean_bias_nats"])?;
        for r in &self.rows {
            w.write_record([
                r.size.to_string(),
                r.final_loss.to_string(),
                r.test_accuracy.to_string(),
                r.mean_bias.to_string(),
            ])?;
        }
        finish(w)
    }

    pub fn timing_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["size", "fit_seconds"])?;
        for r in &self.rows {
            w.write_record([r.size.to_string(), format!("{:.6}", r.fit_seconds)])?;
        }
        finish(w)
    }
}

/// Fits the unconditioned dense calibrator on the first `size` mixed-rate
/// pairs for each size and evaluates it like the benchmark does.
pub fn run_training_sweep_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    sizes: &[usize],
) -> Result<SweepReport> {
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0) || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(
            "sweep sizes must be positive and strictly ascending".into(),
        ));
    }
    let available = prepared.mixed_pairs.len();
    if let Some(&too_big) = sizes.iter().find(|&&s| s > available) {
        return Err(HarnessError::Stage {
            stage: "sweep",
            source: CoreError::Contract(format!(
                "size {too_big} exceeds the {available} available pairs"
            )),
        });
    }
    let fit = cfg
        .fit_config()
        .with_parametrization(Parametrization::Dense);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let start = Instant::now();
        let fitted = fit_calibrator(&prepared.mixed_pairs[..size], &fit).stage("sweep fit")?;
        let fit_seconds = start.elapsed().as_secs_f64();
        let pipe = PredictablePipeline::new(
            prepared.base.clone(),
            Some(Calibrator::Single(fitted.params)),
            cfg.ablation.policy.clone(),
        )
        .stage("sweep")?;
        let curve = evaluate_pipeline(&pipe, &prepared.data, cfg)?;
        rows.push(SweepRow {
            size,
            final_loss: fitted.final_objective,
            test_accuracy: curve.mean_accuracy(),
            mean_bias: curve.mean_bias,
            fit_seconds,
        });
    }
    Ok(SweepReport { rows })
}

pub fn run_training_sweep(
    cfg: &ExperimentConfig,
    base_dir: &std::path::Path,
    sizes: &[usize],
) -> Result<SweepReport> {
    cfg.validate()?;
    let prepared = prepare(cfg, base_dir)?;
    run_training_sweep_prepared(cfg, &prepared, sizes)
}
