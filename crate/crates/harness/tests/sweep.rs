use std::path::Path;

use misscal_harness::bench::{prepare, run_benchmark_prepared};
use misscal_harness::sweep::run_training_sweep_prepared;
use misscal_harness::{ExperimentConfig, Method};

#[test]
fn full_size_matches_the_unconditioned_benchmark_row() {
    let cfg = ExperimentConfig {
        methods: vec![Method::MCalUnconditioned],
        ..ExperimentConfig::default()
    };
    let prepared = prepare(&cfg, Path::new(".")).unwrap();
    let sweep =
        run_training_sweep_prepared(&cfg, &prepared, &[prepared.mixed_pairs.len()]).unwrap();
    let bench = run_benchmark_prepared(&cfg, &prepared, Vec::new()).unwrap();
    let curve = &bench.result(Method::MCalUnconditioned).unwrap().curve;
    assert_eq!(sweep.rows[0].mean_bias, curve.mean_bias);
    assert_eq!(sweep.rows[0].test_accuracy, curve.mean_accuracy());
}

#[test]
fn accuracy_does_not_fall_with_more_pairs_and_fits_are_fast() {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg, Path::new(".")).unwrap();
    let sizes = [100, 300, 1000, prepared.mixed_pairs.len()];
    let report = run_training_sweep_prepared(&cfg, &prepared, &sizes).unwrap();
    let first = report.rows.first().unwrap();
    let last = report.rows.last().unwrap();
    assert!(
        last.test_accuracy >= first.test_accuracy - 0.02,
        "{} pairs: {}, {} pairs: {}",
        first.size,
        first.test_accuracy,
        last.size,
        last.test_accuracy
    );
    for row in &report.rows {
        assert!(
            row.fit_seconds <= 5.0,
            "{} pairs took {}s",
            row.size,
            row.fit_seconds
        );
    }
    assert!(report
        .to_csv()
        .unwrap()
        .starts_with("size,final_loss,test_accuracy,mean_bias_nats\n"));
}

#[test]
fn bad_sizes_are_rejected() {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg, Path::new(".")).unwrap();
    let too_many = prepared.mixed_pairs.len() + 1;
    assert_eq!(
        run_training_sweep_prepared(&cfg, &prepared, &[too_many])
            .unwrap_err()
            .exit_code(),
        3
    );
    assert_eq!(
        run_training_sweep_prepared(&cfg, &prepared, &[300, 100])
            .unwrap_err()
            .exit_code(),
        2
    );
    assert_eq!(
        run_training_sweep_prepared(&cfg, &prepared, &[])
            .unwrap_err()
            .exit_code(),
        2
    );
}
