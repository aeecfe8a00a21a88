use std::path::Path;
use std::process::Command;

fn misscal(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_misscal"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"methods": ["Base", "MCalUnconditioned"], "fit": {"steps": 300}, "explainer": {"num_inputs": 3}}"#;

#[test]
fn bench_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    for out in ["a", "b"] {
        let run = misscal(
            &["bench", "--config", &config, "--seed", "5", "--out", out],
            dir.path(),
        );
        assert!(
            run.status.success(),
            "{}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
    for file in ["report.csv", "faithfulness.csv"] {
        assert_eq!(
            read(dir.path().join("a").join(file)),
            read(dir.path().join("b").join(file))
        );
    }
    let meta: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("a/run_meta.json"))).unwrap();
    assert_eq!(meta["seed"], 5);
    assert!(meta["wall_clock_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let cases: [(&[&str], &[&str]); 7] = [
        (&["gen-data"], &["data.csv"]),
        (&["train-model"], &["model.json", "model_accuracy.csv"]),
        (
            &["fit-calibrator", "--method", "PlattCal"],
            &["calibrator.json"],
        ),
        (&["evaluate", "--method", "base"], &["evaluation.csv"]),
        (
            &["explain", "--method", "Base"],
            &["attributions.csv", "faithfulness.csv"],
        ),
        (
            &["simplex-demo"],
            &["simplex_points.csv", "simplex_summary.csv"],
        ),
        (
            &["sweep", "--sizes", "50,100"],
            &["sweep.csv", "sweep_timing.csv"],
        ),
    ];
    for (i, (args, files)) in cases.iter().enumerate() {
        let out = format!("out{i}");
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", &config, "--out", &out, "--format", "csv"]);
        let run = misscal(&full, dir.path());
        assert!(
            run.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&run.stderr)
        );
        for file in *files {
            assert!(
                dir.path().join(&out).join(file).exists(),
                "{args:?} did not write {file}"
            );
        }
        let leftovers = std::fs::read_dir(dir.path().join(&out))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".partial")
            })
            .count();
        assert_eq!(leftovers, 0);
    }
    let data = read(dir.path().join("out0/data.csv"));
    assert_eq!(data.lines().count(), 1 + 1500);
    assert!(data.lines().next().unwrap().ends_with(",label,split"));
}

#[test]
fn saved_calibrator_evaluates_like_the_fitted_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let fit = misscal(
        &[
            "fit-calibrator",
            "--config",
            &config,
            "--method",
            "MCalUnconditioned",
            "--out",
            "fit",
        ],
        dir.path(),
    );
    assert!(fit.status.success());
    let fitted = misscal(
        &[
            "evaluate",
            "--config",
            &config,
            "--method",
            "MCalUnconditioned",
            "--out",
            "direct",
        ],
        dir.path(),
    );
    let loaded = misscal(
        &[
            "evaluate",
            "--config",
            &config,
            "--calibrator",
            "fit/calibrator.json",
            "--out",
            "loaded",
        ],
        dir.path(),
    );
    assert!(fitted.status.success() && loaded.status.success());
    let strip = |s: String| {
        s.lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        strip(read(dir.path().join("direct/evaluation.csv"))),
        strip(read(dir.path().join("loaded/evaluation.csv")))
    );
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"methods": [], "unknown": 1}"#);
    let run = misscal(&["bench", "--config", &bad, "--out", "x"], dir.path());
    assert_eq!(run.status.code(), Some(2));

    let missing = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "csv", "path": "nowhere.csv", "label_column": "y"}}"#,
    );
    let run = misscal(
        &["gen-data", "--config", &missing, "--out", "y"],
        dir.path(),
    );
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("nowhere.csv"));
    assert!(!dir.path().join("y/data.csv").exists());

    let run = misscal(
        &["fit-calibrator", "--method", "Replace", "--out", "z"],
        dir.path(),
    );
    assert_eq!(run.status.code(), Some(2));

    let run = misscal(&["bench", "--format", "json"], dir.path());
    assert_eq!(run.status.code(), Some(2));
}
