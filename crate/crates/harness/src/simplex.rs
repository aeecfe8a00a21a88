//! Three-class simplex demo: where test points land on the probability
//! simplex when clean, when ablated, and when ablated then calibrated.

use misscal_core::ablation::{build_pair_dataset, quantize_rate, sample_mask_fixed, FeatureMask};
use misscal_core::calib::{CalibratorParams, ClassDistribution, Parametrization};
use misscal_core::fit::{fit_calibrator, Calibrator};
use misscal_core::metrics::{PredictablePipeline, Predictor};
use misscal_core::models::{LabeledDataset, Split};
use misscal_core::rng::{derive_seed, seeded};
use misscal_core::Error as CoreError;

use crate::bench::{finish, prepare};
use crate::config::{stream, ExperimentConfig};
use crate::error::{HarnessError, Result, StageExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Clean,
    Ablated,
    Calibrated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Ablated => "ablated",
            Stage::Calibrated => "calibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    pub point_id: usize,
    pub stage: Stage,
    pub probs: [f64; 3],
    pub predicted: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDemo {
    pub rate: f64,
    pub points: Vec<SimplexPoint>,
    pub clean_accuracy: f64,
    pub uncalibrated_accuracy: f64,
    pub calibrated_accuracy: f64,
}

impl SimplexDemo {
    pub fn points_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["point_id", "stage", "p0", "p1", "p2", "predicted", "label"])?;
        for p in &self.points {
            w.write_record([
                p.point_id.to_string(),
                p.stage.as_str().to_string(),
                p.probs[0].to_string(),
                p.probs[1].to_string(),
                p.probs[2].to_string(),
                p.predicted.to_string(),
                p.label.to_string(),
            ])?;
        }
        finish(w)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "rate",
            "clean_accuracy",
            "uncalibrated_accuracy",
            "calibrated_accuracy",
        ])?;
        w.write_record([
            self.rate.to_string(),
            self.clean_accuracy.to_string(),
            self.uncalibrated_accuracy.to_string(),
            self.calibrated_accuracy.to_string(),
        ])?;
        finish(w)
    }
}

fn triple(d: &ClassDistribution) -> [f64; 3] {
    [d.as_slice()[0], d.as_slice()[1], d.as_slice()[2]]
}

/// Places every test row on the simplex three times. Each row gets one mask
/// with `round(rate * units)` units removed, shared by the ablated and the
/// calibrated stage.
pub fn simplex_points(
    base: &PredictablePipeline,
    calibrated: &PredictablePipeline,
    data: &LabeledDataset,
    rate: f64,
    seed: u64,
) -> misscal_core::Result<SimplexDemo> {
    if base.num_classes() != 3 {
        return Err(CoreError::Contract(format!(
            "simplex demo needs 3 classes, got {}",
            base.num_classes()
        )));
    }
    let units = base.num_units();
    let k = quantize_rate(rate, units)?;
    let mut rng = seeded(seed);
    let rows = data.split(Split::Test);
    let mut points = Vec::with_capacity(3 * rows.len());
    let mut correct = [0usize; 3];
    for (id, &r) in rows.iter().enumerate() {
        let x = data.row(r);
        let label = data.label(r).index();
        let mask = sample_mask_fixed(units, k, &mut rng)?;
        let stages = [
            (
                Stage::Clean,
                base.predict_masked(x, &FeatureMask::none(units))?,
            ),
            (Stage::Ablated, base.predict_masked(x, &mask)?),
            (Stage::Calibrated, calibrated.predict_masked(x, &mask)?),
        ];
        for (slot, (stage, dist)) in stages.into_iter().enumerate() {
            let predicted = dist.argmax().index();
            correct[slot] += usize::from(predicted == label);
            points.push(SimplexPoint {
                point_id: id,
                stage,
                probs: triple(&dist),
                predicted,
                label,
            });
        }
    }
    let total = rows.len().max(1) as f64;
    Ok(SimplexDemo {
        rate,
        points,
        clean_accuracy: correct[0] as f64 / total,
        uncalibrated_accuracy: correct[1] as f64 / total,
        calibrated_accuracy: correct[2] as f64 / total,
    })
}

/// Fits a dense calibrator at the demo rate on calibration-split pairs and
/// places the test split on the simplex. At rate 0 the calibrator is the
/// identity.
pub fn run_simplex_demo(cfg: &ExperimentConfig, base_dir: &std::path::Path) -> Result<SimplexDemo> {
    cfg.validate()?;
    let prepared = prepare(cfg, base_dir)?;
    let m = prepared.base.n_classes();
    if m != 3 {
        return Err(HarnessError::Stage {
            stage: "simplex demo",
            source: CoreError::Contract(format!("simplex demo needs 3 classes, got {m}")),
        });
    }
    let policy = cfg.ablation.policy.clone();
    let base =
        PredictablePipeline::base(prepared.base.clone(), policy.clone()).stage("simplex demo")?;
    let rate = cfg.simplex.rate;
    let units = base.num_units();
    let params = if quantize_rate(rate, units).stage("simplex demo")? == 0 {
        CalibratorParams::identity(m, Parametrization::Dense)
    } else {
        let rows = prepared.data.split(Split::Calibration).to_vec();
        let mut rng = seeded(derive_seed(derive_seed(cfg.seed, stream::SIMPLEX), 0));
        let pairs = build_pair_dataset(
            &prepared.base,
            &prepared.data,
            &rows,
            rate,
            &policy,
            cfg.ablation.ablations_per_input,
            &mut rng,
        )
        .stage("simplex calibration pairs")?;
        let fit = cfg
            .fit_config()
            .with_parametrization(Parametrization::Dense);
        fit_calibrator(&pairs, &fit)
            .stage("simplex calibrator fit")?
            .params
    };
    let calibrated = PredictablePipeline::new(
        prepared.base.clone(),
        Some(Calibrator::Single(params)),
        policy,
    )
    .stage("simplex demo")?;
    simplex_points(
        &base,
        &calibrated,
        &prepared.data,
        rate,
        derive_seed(derive_seed(cfg.seed, stream::SIMPLEX), 1),
    )
    .stage("simplex demo")
}
