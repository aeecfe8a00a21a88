use std::path::Path;

use misscal_core::metrics::PredictablePipeline;
use misscal_harness::bench::{identity_pipeline, prepare};
use misscal_harness::simplex::{run_simplex_demo, simplex_points, Stage};
use misscal_harness::ExperimentConfig;

#[test]
fn identity_calibrator_leaves_the_ablated_cloud_alone() {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg, Path::new(".")).unwrap();
    let base =
        PredictablePipeline::base(prepared.base.clone(), cfg.ablation.policy.clone()).unwrap();
    let identity = identity_pipeline(&prepared, &cfg).unwrap();
    let demo = simplex_points(&base, &identity, &prepared.data, 0.75, 3).unwrap();
    for triple in demo.points.chunks(3) {
        assert_eq!(triple[1].stage, Stage::Ablated);
        assert_eq!(triple[2].stage, Stage::Calibrated);
        assert_eq!(triple[1].probs, triple[2].probs);
    }
    assert_eq!(demo.uncalibrated_accuracy, demo.calibrated_accuracy);
}

#[test]
fn rate_zero_clouds_coincide() {
    let mut cfg = ExperimentConfig::default();
    cfg.simplex.rate = 0.0;
    let demo = run_simplex_demo(&cfg, Path::new(".")).unwrap();
    for triple in demo.points.chunks(3) {
        assert_eq!(triple[0].probs, triple[1].probs);
        assert_eq!(triple[0].probs, triple[2].probs);
    }
    assert_eq!(demo.clean_accuracy, demo.calibrated_accuracy);
}

#[test]
fn calibration_recovers_accuracy_at_three_quarters() {
    let demo = run_simplex_demo(&ExperimentConfig::default(), Path::new(".")).unwrap();
    assert!(
        demo.calibrated_accuracy - demo.uncalibrated_accuracy >= 0.2,
        "uncalibrated {}, calibrated {}",
        demo.uncalibrated_accuracy,
        demo.calibrated_accuracy
    );
    let csv = demo.points_csv().unwrap();
    assert!(csv.starts_with("point_id,stage,p0,p1,p2,predicted,label\n"));
    assert_eq!(csv.lines().count(), 1 + demo.points.len());
}

#[test]
fn four_classes_are_rejected() {
    let mut cfg = ExperimentConfig::default();
    if let misscal_harness::config::DatasetConfig::Synthetic { m, .. } = &mut cfg.dataset {
        *m = 4;
    }
    let err = run_simplex_demo(&cfg, Path::new(".")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("3 classes"), "{err}");
}
