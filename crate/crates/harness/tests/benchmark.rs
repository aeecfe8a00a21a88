use std::path::Path;

use misscal_core::metrics::{missingness_bias, PredictablePipeline, DEFAULT_KL_EPS};
use misscal_core::models::Split;
use misscal_core::rng::{derive_seed, seeded};
use misscal_harness::bench::{prepare, run_benchmark};
use misscal_harness::config::stream;
use misscal_harness::{ExperimentConfig, Method};

fn base_only(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        methods: vec![Method::Base],
        ..ExperimentConfig::default()
    }
}

#[test]
fn base_rows_equal_direct_metric_calls() {
    let cfg = base_only(4);
    let report = run_benchmark(&cfg, Path::new(".")).unwrap();
    let prepared = prepare(&cfg, Path::new(".")).unwrap();
    let pipe =
        PredictablePipeline::base(prepared.base.clone(), cfg.ablation.policy.clone()).unwrap();
    let rows = prepared.data.split(Split::Test).to_vec();
    let curve = &report.result(Method::Base).unwrap().curve;
    assert_eq!(curve.per_rate.len(), 16);
    for (i, point) in curve.per_rate.iter().enumerate() {
        let mut rng = seeded(derive_seed(derive_seed(cfg.seed, stream::EVAL), i as u64));
        let direct = missingness_bias(
            &pipe,
            &prepared.data,
            &rows,
            point.rate,
            cfg.ablation.eval_ablations_per_input,
            &mut rng,
            DEFAULT_KL_EPS,
        )
        .unwrap();
        assert_eq!(point.bias_nats, direct, "rate {}", point.rate);
        assert!(point.bias_nats >= 0.0);
    }
    assert_eq!(curve.per_rate[0].bias_nats, 0.0);
}

#[test]
fn same_config_gives_identical_csv() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Base, Method::TempCal, Method::MCalUnconditioned],
        ..base_only(2)
    };
    let a = run_benchmark(&cfg, Path::new(".")).unwrap();
    let b = run_benchmark(&cfg, Path::new(".")).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.faithfulness_csv().unwrap(), b.faithfulness_csv().unwrap());
    assert_eq!(a.config_hash, cfg.hash());
}

#[test]
fn report_has_one_row_per_method_and_rate() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Replace, Method::Base],
        ..base_only(1)
    };
    let csv = run_benchmark(&cfg, Path::new("."))
        .unwrap()
        .to_csv()
        .unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,rate,bias_nats,accuracy,mean_sufficiency,mean_sensitivity"
    );
    assert_eq!(lines.len(), 1 + 2 * 16 + 2);
    assert!(lines[1].starts_with("Base,0,"));
    assert!(lines[17].starts_with("Replace,0,"));
    assert!(lines[33].starts_with("Base,mean,"));
}

#[test]
fn empty_method_list_is_a_config_error() {
    let cfg = ExperimentConfig {
        methods: Vec::new(),
        ..ExperimentConfig::default()
    };
    let err = run_benchmark(&cfg, Path::new(".")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
