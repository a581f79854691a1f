use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use memaae::data::{
    apply_normalize, fit_normalize, load_csv, window, write_csv, BenchmarkSpec, DataError, RawSeries, SynthBenchmark,
    DEFAULT_BENCHMARK_SPEC,
};
use memaae::evaluation::{best_f1_series, score_series, EvalReport, ScoreSeries};
use memaae::training::{
    load_checkpoint, save_checkpoint, train_with, CheckpointError, EpochLog, ModelBundle, ScoreHorizon, TrainConfig,
    TrainError,
};
use serde::Serialize;

use crate::failure::Classify;
use crate::{Ablation, AblateArgs, EvalArgs, Failure, Horizon, ScoreArgs, SweepArgs, SynthArgs, TrainArgs, TrainingInput};

type Result<T> = std::result::Result<T, Failure>;

pub fn synth(args: SynthArgs) -> Result<()> {
    let text = match &args.spec {
        Some(path) => read_text(path)?,
        None => DEFAULT_BENCHMARK_SPEC.to_string(),
    };
    let spec = BenchmarkSpec::from_toml(&text).usage(|| "invalid anomaly spec".into())?;
    let bench = SynthBenchmark::generate(&spec, args.seed).usage(|| "cannot generate benchmark".into())?;
    fs::create_dir_all(&args.out).runtime(|| format!("cannot create {}", args.out.display()))?;
    write_series(&args.out.join("train.csv"), &bench.train)?;
    write_series(&args.out.join("test.csv"), &bench.test)?;
    #[derive(Serialize)]
    struct SynthRun<'a> {
        command: &'static str,
        seed: u64,
        spec_file: Option<String>,
        spec: &'a BenchmarkSpec,
    }
    write_record(
        &args.out.join("synth_run.toml"),
        &SynthRun {
            command: "synth",
            seed: args.seed,
            spec_file: args.spec.as_ref().map(|p| p.display().to_string()),
            spec: &spec,
        },
    )?;
    println!(
        "wrote {} training and {} test points to {}",
        bench.train.len(),
        bench.test.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainRun<'a> {
    command: &'static str,
    train_csv: String,
    seed: u64,
    ablation: &'static str,
    config: &'a TrainConfig,
    epochs: &'a [EpochLog],
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = resolve_config(&args.input)?;
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(ablation) = args.ablation {
        (config.no_memory, config.no_prediction) = ablation.flags();
    }
    config.validate().usage(|| "invalid configuration".into())?;
    let series = load_training_series(&args.input)?;
    let (bundle, log) = fit(&series, &config)?;
    save_checkpoint(&bundle, &args.out_checkpoint).runtime(|| format!("cannot write {}", args.out_checkpoint.display()))?;
    write_record(
        &sidecar(&args.out_checkpoint),
        &TrainRun {
            command: "train",
            train_csv: args.input.train_csv.display().to_string(),
            seed: config.seed,
            ablation: Ablation::of(config.no_memory, config.no_prediction).name(),
            config: &config,
            epochs: &log,
        },
    )?;
    match log.last() {
        Some(last) => println!(
            "trained {} epochs; final reconstruction loss {:.6}; checkpoint {}",
            log.len(),
            last.losses.rec,
            args.out_checkpoint.display()
        ),
        None => println!("wrote initial checkpoint {}", args.out_checkpoint.display()),
    }
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let bundle = open_checkpoint(&args.checkpoint)?;
    let test = load_series(&args.test_csv, Some(&args.label_column), false)?;
    let scores = score_test(&bundle, &test, args.horizon)?;
    write_scores(&args.out, &scores)?;
    println!("wrote {} scores to {}", scores.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun<'a> {
    command: &'static str,
    checkpoint: String,
    test_csv: String,
    seed: u64,
    ablation: &'static str,
    horizon: ScoreHorizon,
    scored_points: usize,
    report: &'a EvalReport,
    config: &'a TrainConfig,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let bundle = open_checkpoint(&args.checkpoint)?;
    let stored = Ablation::of(bundle.config.no_memory, bundle.config.no_prediction);
    if let Some(expected) = args.ablation {
        if expected != stored {
            return Err(Failure::Usage(anyhow!(
                "checkpoint {} was trained as {}, not {}",
                args.checkpoint.display(),
                stored.name(),
                expected.name()
            )));
        }
    }
    let test = load_series(&args.test_csv, Some(&args.labels), true)?;
    let scores = score_test(&bundle, &test, args.horizon)?;
    let report = best_f1_series(&scores, test.labels().expect("required")).runtime(|| "evaluation failed".into())?;
    fs::create_dir_all(&args.out_dir).runtime(|| format!("cannot create {}", args.out_dir.display()))?;
    write_scores(&args.out_dir.join("scores.csv"), &scores)?;
    write_record(
        &args.out_dir.join("report.toml"),
        &EvalRun {
            command: "eval",
            checkpoint: args.checkpoint.display().to_string(),
            test_csv: args.test_csv.display().to_string(),
            seed: bundle.config.seed,
            ablation: stored.name(),
            horizon: horizon_or(args.horizon, &bundle),
            scored_points: scores.len(),
            report: &report,
            config: &bundle.config,
        },
    )?;
    print_report(&report);
    Ok(())
}

#[derive(Serialize)]
struct Trial {
    label: String,
    report: EvalReport,
    config: TrainConfig,
}

#[derive(Serialize)]
struct TrialsRun<'a> {
    command: &'static str,
    train_csv: String,
    test_csv: String,
    seed: u64,
    trials: &'a [Trial],
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let base = resolve_config(&args.input)?;
    let train = load_training_series(&args.input)?;
    let test = load_series(&args.test_csv, Some(&args.input.label_column), true)?;
    fs::create_dir_all(&args.out_dir).runtime(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut trials = Vec::new();
    println!("{:<26} {:>9} {:>9} {:>9}", "variant", "precision", "recall", "f1");
    for variant in &args.variants {
        let mut config = base.clone();
        (config.no_memory, config.no_prediction) = variant.flags();
        log::info!("training variant {}", variant.name());
        let (bundle, _) = fit(&train, &config)?;
        let report = evaluate(&bundle, &test)?;
        println!(
            "{:<26} {:>9.4} {:>9.4} {:>9.4}",
            variant.name(),
            report.precision,
            report.recall,
            report.f1
        );
        trials.push(Trial {
            label: variant.name().to_string(),
            report,
            config,
        });
    }
    write_table(&args.out_dir.join("ablation.csv"), "variant", &trials)?;
    write_record(
        &args.out_dir.join("ablate_run.toml"),
        &TrialsRun {
            command: "ablate",
            train_csv: args.input.train_csv.display().to_string(),
            test_csv: args.test_csv.display().to_string(),
            seed: base.seed,
            trials: &trials,
        },
    )
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let base = resolve_config(&args.input)?;
    let key = config_key(&args.param);
    // every value is checked before any training starts
    let configs: Vec<(String, TrainConfig)> = args
        .values
        .iter()
        .map(|v| with_param(&base, key, v).map(|c| (v.trim().to_string(), c)))
        .collect::<Result<_>>()?;
    let train = load_training_series(&args.input)?;
    let test = load_series(&args.test_csv, Some(&args.input.label_column), true)?;
    fs::create_dir_all(&args.out_dir).runtime(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut trials = Vec::new();
    println!("{:<26} {:>9} {:>9} {:>9}", key, "precision", "recall", "f1");
    for (value, config) in configs {
        log::info!("training with {key} = {value}");
        let (bundle, _) = fit(&train, &config)?;
        let report = evaluate(&bundle, &test)?;
        println!("{:<26} {:>9.4} {:>9.4} {:>9.4}", value, report.precision, report.recall, report.f1);
        trials.push(Trial {
            label: value,
            report,
            config,
        });
    }
    write_table(&args.out_dir.join("sweep.csv"), key, &trials)?;
    write_record(
        &args.out_dir.join("sweep_run.toml"),
        &TrialsRun {
            command: "sweep",
            train_csv: args.input.train_csv.display().to_string(),
            test_csv: args.test_csv.display().to_string(),
            seed: base.seed,
            trials: &trials,
        },
    )
}

/// Maps the short loss-weight names onto configuration keys.
fn config_key(param: &str) -> &str {
    match param {
        "lambda" => "reconstruction_weight",
        "gamma1" => "forward_prediction_weight",
        "gamma2" => "backward_prediction_weight",
        other => other,
    }
}

/// `base` with `key` set to `value`, parsed as the type the key already has.
fn with_param(base: &TrainConfig, key: &str, value: &str) -> Result<TrainConfig> {
    let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("config serializes to a table");
    let value = value.trim();
    let parsed = match table.get(key) {
        None => return Err(Failure::Usage(anyhow!("unknown configuration key {key:?}"))),
        Some(toml::Value::Integer(_)) => value.parse::<i64>().map(toml::Value::Integer).ok(),
        Some(toml::Value::Float(_)) => value.parse::<f64>().ok().filter(|v| v.is_finite()).map(toml::Value::Float),
        Some(toml::Value::Boolean(_)) => value.parse::<bool>().map(toml::Value::Boolean).ok(),
        Some(toml::Value::String(_)) => Some(toml::Value::String(value.to_string())),
        Some(_) => return Err(Failure::Usage(anyhow!("{key} cannot be swept"))),
    };
    let Some(parsed) = parsed else {
        return Err(Failure::Usage(anyhow!("{value:?} is not a valid value for {key}")));
    };
    table.insert(key.to_string(), parsed);
    TrainConfig::from_toml(&table.to_string()).usage(|| format!("{key} = {value}"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).usage(|| format!("cannot read {}", path.display()))
}

fn resolve_config(input: &TrainingInput) -> Result<TrainConfig> {
    let mut config = match &input.config {
        Some(path) => {
            let text = read_text(path)?;
            TrainConfig::from_toml(&text).usage(|| format!("invalid config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = input.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Loads a CSV, taking `label` as the label column when it is present (or
/// insisting on it when `require_labels`).
fn load_series(path: &Path, label: Option<&str>, require_labels: bool) -> Result<RawSeries> {
    match load_csv(path, label) {
        Err(DataError::MissingLabelColumn(_)) if !require_labels => {
            load_csv(path, None).usage(|| format!("cannot load {}", path.display()))
        }
        other => other.usage(|| format!("cannot load {}", path.display())),
    }
}

fn load_training_series(input: &TrainingInput) -> Result<RawSeries> {
    let series = load_series(&input.train_csv, Some(&input.label_column), false)?;
    if let Some(labels) = series.labels() {
        let flagged = labels.iter().filter(|&&l| l).count();
        if flagged > 0 {
            log::warn!("{flagged} training points are labelled anomalous; they are used as ordinary training data");
        }
    }
    Ok(series)
}

/// Normalizes with the series' own statistics and trains.
fn fit(series: &RawSeries, config: &TrainConfig) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let stats = fit_normalize(series);
    let normalized = apply_normalize(series, &stats).runtime(|| "normalization failed".into())?;
    let windows = window(&normalized, config.window_size).usage(|| "training series is too short".into())?;
    let total = config.epochs;
    let result = train_with(&windows, config, &stats, |e| {
        log::info!(
            "epoch {}/{total}: rec {:.5} fwd {:.5} back {:.5} d {:.4} g {:.4} ({:.1}s)",
            e.epoch,
            e.losses.rec,
            e.losses.pred_fwd,
            e.losses.pred_back,
            e.losses.adv_d,
            e.losses.adv_g,
            e.seconds
        )
    });
    match result {
        Ok((bundle, log)) => Ok((bundle, log.epochs)),
        Err(e @ (TrainError::Config(_) | TrainError::NoEligibleWindow { .. })) => Err(Failure::Usage(e.into())),
        Err(e) => Err(Failure::Runtime(anyhow::Error::from(e).context("training failed"))),
    }
}

fn open_checkpoint(path: &Path) -> Result<ModelBundle> {
    match load_checkpoint(path) {
        Ok(b) => Ok(b),
        Err(e @ CheckpointError::Io(_)) => Err(Failure::Usage(anyhow::Error::from(e).context(format!("cannot open {}", path.display())))),
        Err(e) => Err(Failure::Runtime(anyhow::Error::from(e).context(format!("cannot load {}", path.display())))),
    }
}

fn horizon_or(horizon: Option<Horizon>, bundle: &ModelBundle) -> ScoreHorizon {
    match horizon {
        Some(Horizon::OneStep) => ScoreHorizon::OneStep,
        Some(Horizon::Full) => ScoreHorizon::Full,
        None => bundle.config.score_horizon,
    }
}

fn score_test(bundle: &ModelBundle, test: &RawSeries, horizon: Option<Horizon>) -> Result<ScoreSeries> {
    let normalized = apply_normalize(test, &bundle.stats).usage(|| "test series does not match the checkpoint".into())?;
    score_series(bundle, &normalized, &bundle.config.weights(), horizon_or(horizon, bundle))
        .usage(|| "cannot score test series".into())
}

fn evaluate(bundle: &ModelBundle, test: &RawSeries) -> Result<EvalReport> {
    let scores = score_test(bundle, test, None)?;
    best_f1_series(&scores, test.labels().expect("required")).runtime(|| "evaluation failed".into())
}

fn print_report(r: &EvalReport) {
    println!("precision {:.4}", r.precision);
    println!("recall    {:.4}", r.recall);
    println!("f1        {:.4}", r.f1);
    println!("threshold {}", r.threshold);
}

fn write_series(path: &Path, series: &RawSeries) -> Result<()> {
    let file = fs::File::create(path).runtime(|| format!("cannot create {}", path.display()))?;
    write_csv(std::io::BufWriter::new(file), series, "label").runtime(|| format!("cannot write {}", path.display()))
}

fn write_scores(path: &Path, scores: &ScoreSeries) -> Result<()> {
    let file = fs::File::create(path).runtime(|| format!("cannot create {}", path.display()))?;
    scores
        .write_csv(std::io::BufWriter::new(file))
        .runtime(|| format!("cannot write {}", path.display()))
}

fn write_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let text = toml::to_string(record).runtime(|| "cannot serialize run record".into())?;
    fs::write(path, text).runtime(|| format!("cannot write {}", path.display()))
}

fn write_table(path: &Path, first: &str, trials: &[Trial]) -> Result<()> {
    let mut out = format!("{first},precision,recall,f1,threshold\n");
    for t in trials {
        let r = &t.report;
        out.push_str(&format!("{},{},{},{},{}\n", t.label, r.precision, r.recall, r.f1, r.threshold));
    }
    let mut file = fs::File::create(path).runtime(|| format!("cannot create {}", path.display()))?;
    file.write_all(out.as_bytes()).runtime(|| format!("cannot write {}", path.display()))
}

/// `model.ckpt` -> `model.ckpt.run.toml`
fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".run.toml");
    PathBuf::from(name)
}
