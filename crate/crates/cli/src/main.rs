use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use stef_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stef_core::evaluation::{
    compute_metrics_with, rolling_evaluate_from, write_trace_csv, HistoricalAverage, MapeMode, MetricsReport, Predictor,
};
use stef_core::grid::{
    build_samples, encode_external_factors, parse_timestamp, rasterize_trips, read_demand, read_factors, read_pois,
    read_trips_csv, split_dataset, write_demand, write_factors, DatasetSplit, DemandSeries, FactorSeries, GridSpec,
    ROLLING_WINDOW,
};
use stef_core::model::{ModelParams, StefConfig};
use stef_core::synth::{generate, SynthConfig};
use stef_core::training::{train, TrainConfig};

/// Grid demand forecasting with external factors.
#[derive(Parser)]
#[command(name = "stef", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (demand, factors, POIs, grid) into a directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Bin trip records into an hourly demand container.
    Rasterize {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First time slot; defaults to the earliest trip, floored to the resolution.
        #[arg(long)]
        start: Option<String>,
        /// Number of slots; defaults to covering the latest trip.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Encode POI schedules into a binary factor container.
    EncodeFactors {
        #[arg(long)]
        pois: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Copy the time axis from this demand container.
        #[arg(long, conflicts_with_all = ["start", "steps"])]
        like: Option<PathBuf>,
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Factor count; defaults to the largest factor_index + 1.
        #[arg(long)]
        factors: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// JSON run configuration; every field is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path. The training report is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// One-step metrics on a split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score the historical-average baseline instead of a checkpoint.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, value_enum, default_value = "elementwise")]
        mape: MapeArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rolling evaluation over the end of the test split, feeding forecasts back as inputs.
    Roll {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = ROLLING_WINDOW)]
        window: usize,
        /// Per-step CSV trace (`step,mae,rmse`); defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "elementwise")]
        mape: MapeArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    demand: PathBuf,
    #[arg(long)]
    factors: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    fn tag(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MapeArg {
    Elementwise,
    SumRatio,
}

impl From<MapeArg> for MapeMode {
    fn from(m: MapeArg) -> Self {
        match m {
            MapeArg::Elementwise => MapeMode::Elementwise,
            MapeArg::SumRatio => MapeMode::SumRatio,
        }
    }
}

/// Rejected input or configuration; exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<stef_core::Error>() {
            return match e {
                stef_core::Error::Io { .. } | stef_core::Error::NonFiniteLoss { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

fn default_lags() -> usize {
    4
}
fn default_kernels() -> usize {
    32
}
fn default_width() -> usize {
    128
}
fn default_scale() -> f64 {
    1.0
}
fn default_split() -> (f64, f64, f64) {
    (0.65, 0.15, 0.20)
}

/// Model, optimizer and split settings. Grid size and factor count come from the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    #[serde(default = "default_lags")]
    lags: usize,
    #[serde(default = "default_kernels")]
    kernels: usize,
    #[serde(default = "default_width")]
    dense_width: usize,
    #[serde(default = "default_width")]
    lstm_units: usize,
    /// Demand is divided by this on input and multiplied on output.
    #[serde(default = "default_scale")]
    input_scale: f64,
    #[serde(default = "default_split")]
    split: (f64, f64, f64),
    #[serde(flatten)]
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Record of one invocation.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    inputs: Vec<InputDigest>,
    seed: Option<u64>,
    tool_version: &'static str,
    outputs: Vec<PathBuf>,
    wall_time_secs: f64,
    #[serde(skip_serializing_if = "Value::is_null")]
    details: Value,
}

#[derive(Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<InputDigest>,
}

impl Run {
    fn new(command: &'static str, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.to_path_buf(), sha256: sha256_file(p)? }))
            .collect::<Result<_>>()?;
        Ok(Run { command, started: Instant::now(), inputs })
    }

    fn manifest(self, config: Value, seed: Option<u64>, outputs: Vec<PathBuf>, details: Value) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config,
            inputs: self.inputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            outputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            details,
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_dataset(data: &DataArgs) -> Result<(DemandSeries, FactorSeries)> {
    let demand = read_demand(&data.demand).with_context(|| format!("loading {}", data.demand.display()))?;
    let factors = read_factors(&data.factors).with_context(|| format!("loading {}", data.factors.display()))?;
    Ok((demand, factors))
}

fn split(demand: &DemandSeries, factors: &FactorSeries, cfg: &RunConfig) -> Result<DatasetSplit> {
    let samples = build_samples(demand, factors, cfg.lags)?;
    Ok(split_dataset(&samples, cfg.split)?)
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let run = Run::new("synth", &[config])?;
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = generate(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let paths = [out.join("demand.bin"), out.join("factors.bin"), out.join("pois.json"), out.join("grid.json")];
    write_demand(&paths[0], &data.demand)?;
    write_factors(&paths[1], &data.factors)?;
    write_json(&paths[2], &data.pois)?;
    write_json(&paths[3], &data.grid)?;
    let manifest_path = out.join("manifest.json");
    let details = json!({ "total_demand": data.demand.total(), "pois": data.pois.len() });
    let manifest = run.manifest(serde_json::to_value(&cfg)?, Some(cfg.seed), paths.to_vec(), details);
    write_json(&manifest_path, &manifest)?;
    print_json(&manifest)
}

fn cmd_rasterize(trips: &Path, grid: &Path, out: &Path, start: Option<&str>, steps: Option<usize>) -> Result<()> {
    let run = Run::new("rasterize", &[trips, grid])?;
    let spec = GridSpec::from_json_file(grid)?;
    let file = fs::File::open(trips).with_context(|| format!("opening {}", trips.display()))?;
    let records = read_trips_csv(file)?;
    let period = spec.resolution_minutes as i64 * 60;
    let start = match start {
        Some(s) => parse_timestamp(s)?,
        None => {
            let first = records
                .iter()
                .map(|r| r.pickup_time)
                .min()
                .ok_or_else(|| invalid("trips CSV has no rows; pass --start and --steps to emit an empty series"))?;
            spec.floor_time(first)
        }
    };
    let steps = match steps {
        Some(n) => n,
        None => {
            let last = records.iter().map(|r| r.pickup_time).max().unwrap_or(start);
            ((last - start).num_seconds().max(0) / period) as usize + 1
        }
    };
    if records.is_empty() {
        log::warn!("trips CSV has no rows; writing an all-zero series");
    }
    let (series, report) = rasterize_trips(&records, &spec, start, steps)?;
    if report.dropped() > 0 {
        log::warn!(
            "dropped {} of {} trips ({} outside the grid, {} outside the time range)",
            report.dropped(),
            report.total,
            report.outside_bounds,
            report.outside_time_range
        );
    }
    write_demand(out, &series)?;
    let config = json!({ "grid": spec, "start": start, "steps": steps });
    let details = serde_json::to_value(&report)?;
    finish_file_command(run, out, config, details)
}

fn finish_file_command(run: Run, out: &Path, config: Value, details: Value) -> Result<()> {
    let manifest_path = with_suffix(out, ".manifest.json");
    let manifest = run.manifest(config, None, vec![out.to_path_buf()], details);
    write_json(&manifest_path, &manifest)?;
    print_json(&manifest)
}

#[allow(clippy::too_many_arguments)]
fn cmd_encode_factors(
    pois_path: &Path,
    grid: &Path,
    out: &Path,
    like: Option<&Path>,
    start: Option<&str>,
    steps: Option<usize>,
    factors: Option<usize>,
) -> Result<()> {
    let mut inputs = vec![pois_path, grid];
    inputs.extend(like);
    let run = Run::new("encode-factors", &inputs)?;
    let spec = GridSpec::from_json_file(grid)?;
    let text = fs::read_to_string(pois_path).with_context(|| format!("reading {}", pois_path.display()))?;
    let pois = read_pois(&text)?;
    let (start, steps) = match (like, start, steps) {
        (Some(path), _, _) => {
            let demand = read_demand(path)?;
            if demand.grid() != &spec {
                return Err(invalid(format!("{} uses a different grid", path.display())));
            }
            (demand.start_time(), demand.steps())
        }
        (None, Some(s), Some(n)) => (parse_timestamp(s)?, n),
        _ => return Err(invalid("pass either --like <demand.bin> or both --start and --steps")),
    };
    let m = factors.unwrap_or_else(|| pois.iter().map(|p| p.factor_index + 1).max().unwrap_or(0));
    let (series, report) = encode_external_factors(&pois, &spec, start, steps, m)?;
    write_factors(out, &series)?;
    let config = json!({ "grid": spec, "start": start, "steps": steps, "factors": m });
    finish_file_command(run, out, config, serde_json::to_value(&report)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &DataArgs,
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
) -> Result<()> {
    let mut inputs = vec![data.demand.as_path(), data.factors.as_path()];
    inputs.extend(config);
    let run = Run::new("train", &inputs)?;
    let mut cfg = run_config(config)?;
    cfg.train.seed = seed;
    if let Some(v) = max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = patience {
        cfg.train.early_stop_patience = v;
    }
    if let Some(v) = learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.validate()?;

    let (demand, factors) = load_dataset(data)?;
    let parts = split(&demand, &factors, &cfg)?;
    let model_cfg = StefConfig {
        lags: cfg.lags,
        width: demand.grid().width,
        height: demand.grid().height,
        kernels: cfg.kernels,
        factors: factors.num_factors(),
        dense_width: cfg.dense_width,
        lstm_units: cfg.lstm_units,
        input_scale: cfg.input_scale,
    };
    let params = ModelParams::init(&model_cfg, seed)?;
    log::info!("training {} parameters on {} samples", params.trainable_count(), parts.train.len());
    let (best, report) = train(params, &parts.train, &parts.validation, &cfg.train)?;
    save_checkpoint(out, &Checkpoint { params: best, seed, trained_epochs: report.epochs.len() })?;
    let report_path = with_suffix(out, ".report.json");
    write_json(&report_path, &report)?;
    let manifest = run.manifest(
        json!({ "run": cfg, "model": model_cfg }),
        Some(seed),
        vec![out.to_path_buf(), report_path],
        Value::Null,
    );
    write_json(&with_suffix(out, ".manifest.json"), &manifest)?;
    print_json(&report)
}

fn checkpoint_model(path: &Path, demand: &DemandSeries, factors: &FactorSeries, cfg: &mut RunConfig) -> Result<ModelParams> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mc = &ckpt.params.config;
    let g = demand.grid();
    if (mc.width, mc.height, mc.factors) != (g.width, g.height, factors.num_factors()) {
        return Err(invalid(format!(
            "checkpoint expects a {}x{} grid with {} factors, dataset is {}x{} with {}",
            mc.width,
            mc.height,
            mc.factors,
            g.width,
            g.height,
            factors.num_factors()
        )));
    }
    cfg.lags = mc.lags;
    Ok(ckpt.params)
}

fn baseline_model(demand: &DemandSeries, parts: &DatasetSplit) -> Result<HistoricalAverage> {
    let end = parts.train.target_steps().last().copied().unwrap_or(0) + 1;
    Ok(HistoricalAverage::fit(&demand.slice(0..end)?)?)
}

fn finish_report(run: Run, cfg: &RunConfig, seed: u64, report: &MetricsReport, out: Option<&Path>, mut outputs: Vec<PathBuf>) -> Result<()> {
    let config = serde_json::to_value(cfg)?;
    match out {
        Some(path) => {
            write_json(path, report)?;
            outputs.insert(0, path.to_path_buf());
            let manifest = run.manifest(config, Some(seed), outputs, Value::Null);
            write_json(&with_suffix(path, ".manifest.json"), &manifest)?;
        }
        None => {
            let manifest = run.manifest(config, Some(seed), outputs, Value::Null);
            eprintln!("{}", serde_json::to_string(&manifest)?);
        }
    }
    print_json(report)
}

struct EvalArgs<'a> {
    data: &'a DataArgs,
    checkpoint: Option<&'a Path>,
    baseline: bool,
    config: Option<&'a Path>,
    mape: MapeMode,
    out: Option<&'a Path>,
    seed: u64,
}

type Prepared = (Run, RunConfig, DemandSeries, FactorSeries, Box<dyn Predictor>, DatasetSplit);

fn prepare(command: &'static str, a: &EvalArgs) -> Result<Prepared> {
    let mut inputs = vec![a.data.demand.as_path(), a.data.factors.as_path()];
    inputs.extend(a.checkpoint);
    inputs.extend(a.config);
    let run = Run::new(command, &inputs)?;
    let mut cfg = run_config(a.config)?;
    let (demand, factors) = load_dataset(a.data)?;
    let predictor: Box<dyn Predictor>;
    let parts;
    if a.baseline {
        parts = split(&demand, &factors, &cfg)?;
        predictor = Box::new(baseline_model(&demand, &parts)?);
    } else {
        let path = a.checkpoint.ok_or_else(|| invalid("--checkpoint is required"))?;
        predictor = Box::new(checkpoint_model(path, &demand, &factors, &mut cfg)?);
        parts = split(&demand, &factors, &cfg)?;
    }
    Ok((run, cfg, demand, factors, predictor, parts))
}

fn cmd_evaluate(a: EvalArgs, which: SplitName) -> Result<()> {
    let (run, cfg, _, _, predictor, parts) = prepare("evaluate", &a)?;
    let set = match which {
        SplitName::Train => &parts.train,
        SplitName::Validation => &parts.validation,
        SplitName::Test => &parts.test,
    };
    let preds = predictor.predict(set)?;
    let mut report = compute_metrics_with(&preds, &set.target_tensor(), a.mape)?;
    report.dataset_tag = which.tag().to_string();
    finish_report(run, &cfg, a.seed, &report, a.out, Vec::new())
}

fn cmd_roll(a: EvalArgs, window: usize, trace: Option<&Path>) -> Result<()> {
    let (run, cfg, demand, factors, predictor, parts) = prepare("roll", &a)?;
    if window == 0 {
        return Err(invalid("--window must be at least 1"));
    }
    if window > parts.test.len() {
        return Err(invalid(format!(
            "--window {window} exceeds the {} test samples available",
            parts.test.len()
        )));
    }
    let first = parts.test.target_steps()[parts.test.len() - window];
    let outcome = rolling_evaluate_from(predictor.as_ref(), &demand, &factors, cfg.lags, first, window)?;
    let mut report = outcome.metrics.clone();
    report.dataset_tag = "test".into();
    report.mape_mode = a.mape;
    if a.mape == MapeMode::SumRatio {
        let targets = stef_core::Tensor::new(
            outcome.predictions.shape().to_vec(),
            (first..first + window).flat_map(|t| demand.frame(t).iter().map(|&c| c as f64)).collect(),
        )?;
        let r = compute_metrics_with(&outcome.predictions, &targets, MapeMode::SumRatio)?;
        report.mape = r.mape;
    }
    let trace_path = trace.map(Path::to_path_buf).or_else(|| a.out.map(|o| with_suffix(o, ".trace.csv")));
    let mut outputs = Vec::new();
    if let Some(path) = &trace_path {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        write_trace_csv(&outcome.trace, file)?;
        outputs.push(path.clone());
    }
    finish_report(run, &cfg, a.seed, &report, a.out, outputs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Rasterize { trips, grid, out, start, steps } => {
            cmd_rasterize(&trips, &grid, &out, start.as_deref(), steps)
        }
        Command::EncodeFactors { pois, grid, out, like, start, steps, factors } => {
            cmd_encode_factors(&pois, &grid, &out, like.as_deref(), start.as_deref(), steps, factors)
        }
        Command::Train { data, config, out, seed, max_epochs, patience, learning_rate, batch_size } => {
            cmd_train(&data, config.as_deref(), &out, seed, max_epochs, patience, learning_rate, batch_size)
        }
        Command::Evaluate { data, checkpoint, baseline, config, split, mape, out, seed } => {
            let args = EvalArgs {
                data: &data,
                checkpoint: checkpoint.as_deref(),
                baseline,
                config: config.as_deref(),
                mape: mape.into(),
                out: out.as_deref(),
                seed,
            };
            cmd_evaluate(args, split)
        }
        Command::Roll { data, checkpoint, baseline, config, window, trace, mape, out, seed } => {
            let args = EvalArgs {
                data: &data,
                checkpoint: checkpoint.as_deref(),
                baseline,
                config: config.as_deref(),
                mape: mape.into(),
                out: out.as_deref(),
                seed,
            };
            cmd_roll(args, window, trace.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn run_config_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.lags, c.kernels, c.dense_width, c.lstm_units), (4, 32, 128, 128));
        assert_eq!(c.split, (0.65, 0.15, 0.20));
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.input_scale, 1.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&anyhow::Error::new(stef_core::Error::Invalid("x".into())).context("ctx")), 1);
        assert_eq!(exit_code(&anyhow::Error::new(stef_core::Error::NonFiniteLoss { epoch: 0, batch: 0 })), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("disk")), 2);
    }
}
