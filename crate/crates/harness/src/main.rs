use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use misscal_core::explain::AttributionVector;
use misscal_core::fit::Calibrator;
use misscal_core::metrics::PredictablePipeline;
use misscal_core::metrics::Predictor;
use misscal_core::models::{LabeledDataset, Split};

use misscal_harness::bench::{
    build_pipeline, evaluate_pipeline, explain_with, faithfulness, faithfulness_csv, prepare,
    run_benchmark_prepared, Prepared,
};
use misscal_harness::config::ExplainerKind;
use misscal_harness::error::StageExt;
use misscal_harness::output::OutputSet;
use misscal_harness::persist::{calibrator_to_json, load_calibrator, Metadata};
use misscal_harness::simplex::run_simplex_demo;
use misscal_harness::sweep::run_training_sweep_prepared;
use misscal_harness::{ExperimentConfig, HarnessError, Method, Result};

#[derive(Debug, Parser)]
#[command(
    name = "misscal",
    version,
    about = "Missingness-bias calibration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Falls back to the config's `output_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the dataset with its split assignment.
    GenData(Common),
    /// Train the base model and write it as JSON.
    TrainModel(Common),
    /// Fit one calibrator and write its JSON document.
    FitCalibrator {
        #[command(flatten)]
        common: Common,
        /// TempCal, PlattCal, MCalUnconditioned or MCalConditioned.
        #[arg(long, default_value = "MCalConditioned")]
        method: Method,
    },
    /// Bias and accuracy over the rate grid for one pipeline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "MCalConditioned")]
        method: Method,
        /// Evaluate a saved calibrator on the base model instead of fitting one.
        #[arg(long, conflicts_with = "method")]
        calibrator: Option<PathBuf>,
    },
    /// Attributions and faithfulness for one pipeline.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "MCalConditioned")]
        method: Method,
    },
    /// The full method comparison.
    Bench(Common),
    /// Three-class simplex point clouds.
    SimplexDemo(Common),
    /// Calibrator quality against the number of fitting pairs.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sizes; overrides the config's `sweep_sizes`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainModel(c)
            | Command::Bench(c)
            | Command::SimplexDemo(c) => c,
            Command::FitCalibrator { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Explain { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

impl Context {
    fn from_common(common: &Common) -> Result<Self> {
        let (mut cfg, base_dir) = match &common.config {
            Some(path) => {
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (ExperimentConfig::load(path)?, dir)
            }
            None => (ExperimentConfig::default(), PathBuf::from(".")),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let out_dir = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            cfg,
            base_dir,
            out_dir,
        })
    }

    fn metadata(&self) -> Metadata {
        Metadata {
            seed: self.cfg.seed,
            created: None,
            config_hash: self.cfg.hash(),
        }
    }

    fn prepare(&self) -> Result<Prepared> {
        prepare(&self.cfg, &self.base_dir)
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    faithfulness_output: &'static str,
    wall_clock_seconds: f64,
    stage_seconds: Vec<(String, f64)>,
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn dataset_csv(data: &LabeledDataset) -> Result<String> {
    let mut split_of = vec![""; data.len()];
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Calibration, "calibration"),
        (Split::Test, "test"),
    ] {
        for &r in data.split(split) {
            split_of[r] = name;
        }
    }
    let mut header: Vec<&str> = data.feature_names().iter().map(String::as_str).collect();
    header.extend(["label", "split"]);
    let rows = (0..data.len()).map(|r| {
        let mut row: Vec<String> = data.row(r).iter().map(f64::to_string).collect();
        row.push(data.label(r).index().to_string());
        row.push(split_of[r].to_string());
        row
    });
    csv_text(&header, rows)
}

fn curve_csv(label: &str, curve: &misscal_core::metrics::BiasReport) -> Result<String> {
    let rows = curve
        .per_rate
        .iter()
        .map(|p| {
            vec![
                label.to_string(),
                p.rate.to_string(),
                p.bias_nats.to_string(),
                p.accuracy.to_string(),
            ]
        })
        .chain(std::iter::once(vec![
            label.to_string(),
            "mean".to_string(),
            curve.mean_bias.to_string(),
            curve.mean_accuracy().to_string(),
        ]));
    csv_text(&["method", "rate", "bias_nats", "accuracy"], rows)
}

fn calibrated_method(method: Method) -> Result<Method> {
    match method {
        Method::TempCal
        | Method::PlattCal
        | Method::MCalUnconditioned
        | Method::MCalConditioned => Ok(method),
        other => Err(HarnessError::Config(format!(
            "{other} does not fit a calibrator"
        ))),
    }
}

fn attributions_csv(rows: &[(usize, ExplainerKind, AttributionVector)]) -> Result<String> {
    let lines = rows.iter().flat_map(|(input, kind, alpha)| {
        alpha.as_slice().iter().enumerate().map(move |(unit, a)| {
            vec![
                input.to_string(),
                kind.as_str().to_string(),
                unit.to_string(),
                a.to_string(),
            ]
        })
    });
    csv_text(&["input", "explainer", "unit", "attribution"], lines)
}

fn timing_csv(timings: &[(String, f64)]) -> Result<String> {
    csv_text(
        &["stage", "seconds"],
        timings
            .iter()
            .map(|(s, t)| vec![s.clone(), format!("{t:.6}")]),
    )
}

fn run(command: &Command) -> Result<Vec<PathBuf>> {
    let common = command.common();
    let Format::Csv = common.format;
    let ctx = Context::from_common(common)?;
    let start = Instant::now();
    let mut out = OutputSet::new(&ctx.out_dir)?;
    match command {
        Command::GenData(_) => {
            let data = ctx.cfg.dataset.load(ctx.cfg.seed, &ctx.base_dir)?;
            out.write("data.csv", &dataset_csv(&data)?)?;
        }
        Command::TrainModel(_) => {
            let prepared = ctx.prepare()?;
            let model = serde_json::to_string_pretty(&prepared.base).expect("models serialize");
            out.write("model.json", &(model + "\n"))?;
            let base =
                PredictablePipeline::base(prepared.base.clone(), ctx.cfg.ablation.policy.clone())
                    .stage("base pipeline")?;
            let rows = [Split::Train, Split::Calibration, Split::Test].map(|split| {
                let rows = prepared.data.split(split);
                let correct = rows
                    .iter()
                    .filter(|&&r| {
                        base.base_class(prepared.data.row(r)).ok() == Some(prepared.data.label(r))
                    })
                    .count();
                let name = match split {
                    Split::Train => "train",
                    Split::Calibration => "calibration",
                    Split::Test => "test",
                };
                vec![
                    name.to_string(),
                    rows.len().to_string(),
                    (correct as f64 / rows.len().max(1) as f64).to_string(),
                ]
            });
            out.write(
                "model_accuracy.csv",
                &csv_text(&["split", "rows", "accuracy"], rows)?,
            )?;
        }
        Command::FitCalibrator { method, .. } => {
            let method = calibrated_method(*method)?;
            let prepared = ctx.prepare()?;
            let pipe = build_pipeline(method, &prepared, &ctx.cfg)?;
            let calibrator = pipe
                .calibrator()
                .expect("calibrated methods carry a calibrator");
            out.write(
                "calibrator.json",
                &(calibrator_to_json(calibrator, &ctx.metadata()) + "\n"),
            )?;
        }
        Command::Evaluate {
            method, calibrator, ..
        } => {
            let prepared = ctx.prepare()?;
            let (label, pipe) = match calibrator {
                Some(path) => {
                    let loaded: Calibrator = load_calibrator(path)?;
                    let pipe = PredictablePipeline::new(
                        prepared.base.clone(),
                        Some(loaded),
                        ctx.cfg.ablation.policy.clone(),
                    )
                    .stage("loaded calibrator")?;
                    ("loaded".to_string(), pipe)
                }
                None => (
                    method.as_str().to_string(),
                    build_pipeline(*method, &prepared, &ctx.cfg)?,
                ),
            };
            let curve = evaluate_pipeline(&pipe, &prepared.data, &ctx.cfg)?;
            out.write("evaluation.csv", &curve_csv(&label, &curve)?)?;
        }
        Command::Explain { method, .. } => {
            let prepared = ctx.prepare()?;
            let pipe = build_pipeline(*method, &prepared, &ctx.cfg)?;
            let inputs: Vec<usize> = prepared
                .data
                .split(Split::Test)
                .iter()
                .copied()
                .take(ctx.cfg.explainer.num_inputs)
                .collect();
            let mut rows = Vec::new();
            for &kind in &ctx.cfg.explainer.explainers {
                for (i, &r) in inputs.iter().enumerate() {
                    let settings = ctx.cfg.explainer_settings(i as u64);
                    rows.push((
                        i,
                        kind,
                        explain_with(kind, &pipe, prepared.data.row(r), &settings)
                            .stage("explanation")?,
                    ));
                }
            }
            debug_assert!(rows.iter().all(|(_, _, a)| a.len() == pipe.num_units()));
            out.write("attributions.csv", &attributions_csv(&rows)?)?;
            let rows = faithfulness(*method, &pipe, &prepared.data, &ctx.cfg)?;
            out.write("faithfulness.csv", &faithfulness_csv(&rows)?)?;
        }
        Command::Bench(_) => {
            let prep_start = Instant::now();
            let prepared = ctx.prepare()?;
            let timings = vec![("prepare".to_string(), prep_start.elapsed().as_secs_f64())];
            let report = run_benchmark_prepared(&ctx.cfg, &prepared, timings)?;
            out.write("report.csv", &report.to_csv()?)?;
            out.write("faithfulness.csv", &report.faithfulness_csv()?)?;
            let meta = RunMeta {
                command: "bench",
                seed: report.seed,
                config_hash: report.config_hash.clone(),
                faithfulness_output: "probability of the clean predicted class",
                wall_clock_seconds: start.elapsed().as_secs_f64(),
                stage_seconds: report.timings.clone(),
            };
            out.write(
                "run_meta.json",
                &(serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"),
            )?;
        }
        Command::SimplexDemo(_) => {
            let demo = run_simplex_demo(&ctx.cfg, &ctx.base_dir)?;
            out.write("simplex_points.csv", &demo.points_csv()?)?;
            out.write("simplex_summary.csv", &demo.summary_csv()?)?;
        }
        Command::Sweep { sizes, .. } => {
            let sizes = sizes.clone().unwrap_or_else(|| ctx.cfg.sweep_sizes.clone());
            let prepared = ctx.prepare()?;
            let report = run_training_sweep_prepared(&ctx.cfg, &prepared, &sizes)?;
            out.write("sweep.csv", &report.to_csv()?)?;
            out.write("sweep_timing.csv", &report.timing_csv()?)?;
        }
    }
    if !matches!(command, Command::Bench(_)) {
        out.write(
            "timing.csv",
            &timing_csv(&[("total".to_string(), start.elapsed().as_secs_f64())])?,
        )?;
    }
    out.commit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
