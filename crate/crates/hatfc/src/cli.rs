//! Command-line entry points: train, forecast, eval, bench, synth.
//!
//! Configuration is a flat JSON object with dotted keys (`model.d`,
//! `train.lr`, `horizon`, ...). Flags take precedence over the config
//! file, which takes precedence over defaults. Every run directory
//! receives the fully resolved configuration, and re-running from that
//! file reproduces all numeric outputs bit-exactly at the same
//! precision.
//!
//! Exit codes: 0 success, 2 usage/configuration errors, 3 numeric
//! failures. `HATFC_THREADS` caps worker threads.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::bench;
use crate::data::{self, Region, Scaler, SeriesDataset, SynthKind};
use crate::error::{Error, Result};
use crate::evaluation::{
    fit_linear_baseline, persistence_baseline, score_windows, ForecastReport, LinearKind,
};
use crate::mat::{cast, Mat};
use crate::model::{checkpoint, ModelConfig};
use crate::tensor::Real;
use crate::training::{self, fit, FitSummary, TrainConfig};
use crate::{autoregress, thread_pool};

/// Hierarchical autoregressive transformer forecasting.
#[derive(Debug, Parser)]
#[command(name = "hatfc", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint plus training reports.
    Train(TrainArgs),
    /// Forecast from a checkpoint over the tail of an input CSV.
    Forecast(ForecastArgs),
    /// Evaluate a checkpoint (and baselines) on a dataset's test region.
    Eval(EvalArgs),
    /// Measure windowed vs full attention complexity scaling.
    Bench(BenchArgs),
    /// Generate a synthetic dataset CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// Flat dotted-key JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed (overrides config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Float width: 32 or 64.
    #[arg(long)]
    pub precision: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset CSV path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total forecast horizon; must divide evenly by --segments.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of autoregressive segments K.
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Hidden dimension d.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stride between training window origins.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub date_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input CSV with at least `lookback` rows.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub date_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Skip training the linear baselines.
    #[arg(long)]
    pub skip_baselines: bool,
    /// Stride between evaluation windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Report metrics on the original (de-standardized) scale.
    #[arg(long)]
    pub original_scale: bool,
    /// Baseline training epochs (defaults to config train.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub date_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated sequence lengths, e.g. 512,1024,2048.
    #[arg(long, default_value = "512,1024,2048")]
    pub grid: String,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// sine_trend, multiscale, or constant.
    #[arg(long, default_value = "multiscale")]
    pub kind: String,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub variates: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Output CSV file.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

/// Fully resolved run configuration: model + training + data + output,
/// with source precedence flags > config file > defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    pub date_column: Option<String>,
    pub out_dir: PathBuf,
    pub precision: u32,
    pub horizon: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub lambda_ramp: bool,
    pub metrics_original_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_path: None,
            date_column: None,
            out_dir: PathBuf::from("hatfc_out"),
            precision: 32,
            horizon: 96,
            train_frac: 0.7,
            val_frac: 0.1,
            lambda_ramp: false,
            metrics_original_scale: false,
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("key {key} wants a non-negative integer")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("key {key} wants a number")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("key {key} wants a boolean")))
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Config(format!("key {key} wants a string")))
}

impl RunConfig {
    /// Apply one flat dotted key. Unknown keys are configuration
    /// errors so typos never pass silently.
    pub fn apply_key(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "model.lookback" => self.model.lookback = as_usize(key, v)?,
            "model.segments" => self.model.segments = as_usize(key, v)?,
            "model.window" => self.model.window = as_usize(key, v)?,
            "model.d" => self.model.hidden = as_usize(key, v)?,
            "model.heads" => self.model.heads = as_usize(key, v)?,
            "model.d_k" => self.model.d_k = as_usize(key, v)?,
            "model.d_v" => self.model.d_v = as_usize(key, v)?,
            "model.n_blocks" => self.model.n_blocks = as_usize(key, v)?,
            "model.variates" => self.model.variates = as_usize(key, v)?,
            "model.gamma_discount" => self.model.gamma_discount = as_f64(key, v)?,
            "model.ema_coeff" => self.model.ema_coeff = as_f64(key, v)?,
            "model.use_segment_init" => self.model.use_segment_init = as_bool(key, v)?,
            "model.lambda_ramp" => self.lambda_ramp = as_bool(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.clip_norm" => self.train.clip_norm = as_f64(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.seed" => self.train.seed = as_usize(key, v)? as u64,
            "train.teacher_forcing" => self.train.teacher_forcing = as_bool(key, v)?,
            "train.beta1" => self.train.beta1 = as_f64(key, v)?,
            "train.beta2" => self.train.beta2 = as_f64(key, v)?,
            "train.eps" => self.train.eps = as_f64(key, v)?,
            "train.train_stride" => self.train.train_stride = as_usize(key, v)?,
            "train.val_stride" => self.train.val_stride = as_usize(key, v)?,
            "data.path" => self.data_path = Some(PathBuf::from(as_str(key, v)?)),
            "data.date_column" => self.date_column = Some(as_str(key, v)?),
            "data.train_frac" => self.train_frac = as_f64(key, v)?,
            "data.val_frac" => self.val_frac = as_f64(key, v)?,
            // compatibility no-op: some pipelines specify a warm-start
            // label length, but the generation context always contains
            // the whole lookback, so there is nothing to configure
            "data.label_len" => {
                let _ = as_usize(key, v)?;
            }
            "horizon" => self.horizon = as_usize(key, v)?,
            "seed" => self.train.seed = as_usize(key, v)? as u64,
            "out" => self.out_dir = PathBuf::from(as_str(key, v)?),
            "precision" => self.precision = as_usize(key, v)? as u32,
            "metrics.original_scale" => self.metrics_original_scale = as_bool(key, v)?,
            other => {
                return Err(Error::Config(format!("unknown configuration key '{other}'")))
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not JSON: {e}", path.display())))?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        for (k, v) in map {
            self.apply_key(k, v)?;
        }
        Ok(())
    }

    /// Derive the segment length from the requested horizon. The
    /// horizon must split evenly into K segments.
    pub fn resolve_segment_len(&mut self) -> Result<()> {
        if self.horizon == 0 || self.model.segments == 0 {
            return Err(Error::Config("horizon and segments must be >= 1".into()));
        }
        if self.horizon % self.model.segments != 0 {
            return Err(Error::Config(format!(
                "horizon {} does not divide into {} segments",
                self.horizon, self.model.segments
            )));
        }
        self.model.segment_len = self.horizon / self.model.segments;
        if self.lambda_ramp {
            let h = self.model.segment_len;
            self.model.lambda_weights = (1..=h).map(|t| t as f64 / h as f64).collect();
        }
        Ok(())
    }

    /// The resolved configuration as a sorted flat map.
    pub fn flat_map(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("model.lookback", self.model.lookback.into());
        put("model.segments", self.model.segments.into());
        put("model.window", self.model.window.into());
        put("model.d", self.model.hidden.into());
        put("model.heads", self.model.heads.into());
        put("model.d_k", self.model.d_k.into());
        put("model.d_v", self.model.d_v.into());
        put("model.n_blocks", self.model.n_blocks.into());
        put("model.variates", self.model.variates.into());
        put("model.gamma_discount", self.model.gamma_discount.into());
        put("model.ema_coeff", self.model.ema_coeff.into());
        put("model.use_segment_init", self.model.use_segment_init.into());
        put("model.lambda_ramp", self.lambda_ramp.into());
        put("train.lr", self.train.lr.into());
        put("train.clip_norm", self.train.clip_norm.into());
        put("train.epochs", self.train.epochs.into());
        put("train.batch_size", self.train.batch_size.into());
        put("train.seed", self.train.seed.into());
        put("train.teacher_forcing", self.train.teacher_forcing.into());
        put("train.beta1", self.train.beta1.into());
        put("train.beta2", self.train.beta2.into());
        put("train.eps", self.train.eps.into());
        put("train.train_stride", self.train.train_stride.into());
        put("train.val_stride", self.train.val_stride.into());
        if let Some(p) = &self.data_path {
            put("data.path", p.display().to_string().into());
        }
        if let Some(d) = &self.date_column {
            put("data.date_column", d.clone().into());
        }
        put("data.train_frac", self.train_frac.into());
        put("data.val_frac", self.val_frac.into());
        put("horizon", self.horizon.into());
        put("out", self.out_dir.display().to_string().into());
        put("precision", self.precision.into());
        put("metrics.original_scale", self.metrics_original_scale.into());
        m
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.flat_map())?;
        Ok(())
    }
}

fn resolve_common(common: &CommonArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &common.config {
        rc.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        rc.train.seed = seed;
    }
    if let Some(out) = &common.out {
        rc.out_dir = out.clone();
    }
    if let Some(p) = common.precision {
        if p != 32 && p != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {p}")));
        }
        rc.precision = p;
    }
    Ok(rc)
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut rc = resolve_common(&args.common)?;
    if let Some(p) = &args.data {
        rc.data_path = Some(p.clone());
    }
    if let Some(h) = args.horizon {
        rc.horizon = h;
    }
    if let Some(k) = args.segments {
        rc.model.segments = k;
    }
    if let Some(l) = args.lookback {
        rc.model.lookback = l;
    }
    if let Some(w) = args.window {
        rc.model.window = w;
    }
    if let Some(d) = args.hidden {
        rc.model.hidden = d;
    }
    if let Some(h) = args.heads {
        rc.model.heads = h;
    }
    if let Some(b) = args.blocks {
        rc.model.n_blocks = b;
    }
    if let Some(e) = args.epochs {
        rc.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        rc.train.lr = lr;
    }
    if let Some(s) = args.stride {
        rc.train.train_stride = s;
    }
    if let Some(d) = &args.date_column {
        rc.date_column = Some(d.clone());
    }
    rc.resolve_segment_len()?;

    let data_path = rc
        .data_path
        .clone()
        .ok_or_else(|| Error::Config("missing dataset path (--data or data.path)".into()))?;
    let mut ds = data::load_csv(&data_path, rc.date_column.as_deref())?;
    ds.set_split(rc.train_frac, rc.val_frac)?;
    rc.model.variates = ds.v();
    rc.model.validate()?;
    rc.train.validate()?;
    ds.standardize()?;

    ensure_out_dir(&rc.out_dir)?;
    rc.write_resolved(&rc.out_dir.join("resolved_config.json"))?;

    match rc.precision {
        64 => train_at::<f64>(&rc, &ds),
        _ => train_at::<f32>(&rc, &ds),
    }
}

fn train_at<T: Real>(rc: &RunConfig, ds: &SeriesDataset) -> Result<()> {
    let report = fit::<T>(ds, &rc.model, &rc.train)?;
    let scaler_state = ds.scaler().map(|s| s.to_state());
    checkpoint::save(
        &rc.out_dir.join("checkpoint.ckpt"),
        &rc.model,
        &report.best_params,
        scaler_state.as_ref(),
    )?;
    training::write_report_csv(&rc.out_dir.join("training_report.csv"), &report.epochs)?;
    training::write_summary_json(
        &rc.out_dir.join("training_summary.json"),
        &FitSummary {
            epochs: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_val_mse: report.best_val_mse,
            final_train_loss: report.epochs.last().map(|r| r.train_loss),
            num_params: report.final_params.num_params(),
            runtime_seconds: report.runtime_seconds,
        },
    )?;
    println!(
        "trained {} epochs, best val mse {:.6}, checkpoint at {}",
        report.epochs.len(),
        report.best_val_mse,
        rc.out_dir.join("checkpoint.ckpt").display()
    );
    Ok(())
}

pub fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let rc = resolve_common(&args.common)?;
    ensure_out_dir(&rc.out_dir)?;
    match checkpoint::peek_precision(&args.checkpoint)? {
        64 => forecast_at::<f64>(&args, &rc),
        _ => forecast_at::<f32>(&args, &rc),
    }
}

fn forecast_at<T: Real>(args: &ForecastArgs, rc: &RunConfig) -> Result<()> {
    let (cfg, params, scaler_state) = checkpoint::load::<T>(&args.checkpoint)?;
    let ds = data::load_csv(&args.input, args.date_column.as_deref())?;
    if ds.v() != cfg.variates {
        return Err(Error::Config(format!(
            "input has {} variates, checkpoint expects {}",
            ds.v(),
            cfg.variates
        )));
    }
    if ds.n() < cfg.lookback {
        return Err(Error::Config(format!(
            "input has {} rows, the model needs at least lookback {}",
            ds.n(),
            cfg.lookback
        )));
    }
    let scaler = scaler_state
        .map(|s| Scaler::from_state(&s))
        .unwrap_or_else(|| Scaler {
            means: vec![0.0; cfg.variates],
            stds: vec![1.0; cfg.variates],
            constant_channels: Vec::new(),
        });
    let tail = ds.values().slice_rows(ds.n() - cfg.lookback, cfg.lookback)?;
    let standardized = scaler.transform(&tail);
    let x: Mat<T> = cast(&standardized);
    let pred = autoregress::generate(&x, &params, &cfg)?;
    let pred64 = pred.map(|v| v.to_f64().unwrap());
    let restored = scaler.inverse(&pred64);

    let path = rc.out_dir.join("forecast.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    let mut header = vec!["step".to_string()];
    header.extend((0..cfg.variates).map(|c| format!("v{c}")));
    writeln!(w, "{}", header.join(","))?;
    for s in 0..restored.rows() {
        let mut row = vec![(s + 1).to_string()];
        row.extend((0..cfg.variates).map(|c| format!("{}", restored.get(s, c))));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    println!("wrote {} forecast steps to {}", restored.rows(), path.display());
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut rc = resolve_common(&args.common)?;
    if args.original_scale {
        rc.metrics_original_scale = true;
    }
    if let Some(e) = args.epochs {
        rc.train.epochs = e;
    }
    ensure_out_dir(&rc.out_dir)?;
    match checkpoint::peek_precision(&args.checkpoint)? {
        64 => eval_at::<f64>(&args, &rc),
        _ => eval_at::<f32>(&args, &rc),
    }
}

fn eval_at<T: Real>(args: &EvalArgs, rc: &RunConfig) -> Result<()> {
    let (cfg, params, scaler_state) = checkpoint::load::<T>(&args.checkpoint)?;
    let mut ds = data::load_csv(&args.data, args.date_column.as_deref())?;
    ds.set_split(rc.train_frac, rc.val_frac)?;
    if ds.v() != cfg.variates {
        return Err(Error::Config(format!(
            "dataset has {} variates, checkpoint expects {}",
            ds.v(),
            cfg.variates
        )));
    }
    match scaler_state {
        Some(s) => ds.standardize_with(Scaler::from_state(&s))?,
        None => ds.standardize()?,
    }
    let horizon = cfg.horizon();
    let windows = ds.window_iter(cfg.lookback, horizon, args.stride.max(1), Region::Test)?;
    let scaler = ds.scaler().expect("standardized above").clone();
    let rescale = |m: &Mat<f64>| -> Mat<f64> {
        if rc.metrics_original_scale {
            scaler.inverse(m)
        } else {
            m.clone()
        }
    };
    let truths: Vec<Mat<f64>> = windows.iter().map(|w| rescale(&w.target)).collect();

    // model forecasts
    let started = Instant::now();
    let pool = thread_pool();
    let preds: Vec<Mat<f64>> = {
        let results: Vec<Result<Mat<f64>>> = pool.install(|| {
            use rayon::prelude::*;
            windows
                .par_iter()
                .map(|w| {
                    let x: Mat<T> = cast(&w.lookback);
                    let p = autoregress::generate(&x, &params, &cfg)?;
                    Ok(rescale(&p.map(|v| v.to_f64().unwrap())))
                })
                .collect()
        });
        results.into_iter().collect::<Result<_>>()?
    };
    let model_time = started.elapsed().as_secs_f64();

    let mut scores = Vec::new();
    let mut profiles = Vec::new();
    let (s, p) = score_windows("model", &preds, &truths, model_time)?;
    scores.push(s);
    profiles.push(p);

    let t0 = Instant::now();
    let persist: Vec<Mat<f64>> = windows
        .iter()
        .map(|w| rescale(&persistence_baseline(&w.lookback, horizon)))
        .collect();
    let (s, p) = score_windows("persistence", &persist, &truths, t0.elapsed().as_secs_f64())?;
    scores.push(s);
    profiles.push(p);

    if !args.skip_baselines {
        let train_windows = ds.window_iter(cfg.lookback, horizon, 1, Region::Train)?;
        for kind in [LinearKind::Linear, LinearKind::DLinear, LinearKind::NLinear] {
            let t0 = Instant::now();
            let baseline = fit_linear_baseline(kind, &train_windows, &rc.train)?;
            let preds: Vec<Mat<f64>> = windows
                .iter()
                .map(|w| baseline.predict(&w.lookback).map(|p| rescale(&p)))
                .collect::<Result<_>>()?;
            let (s, p) = score_windows(
                &kind.to_string(),
                &preds,
                &truths,
                t0.elapsed().as_secs_f64(),
            )?;
            scores.push(s);
            profiles.push(p);
        }
    }

    let report = ForecastReport {
        horizon,
        scores,
        per_step_mse: profiles,
    };
    report.write_csv(&rc.out_dir.join("forecast_report.csv"))?;
    report.write_json(&rc.out_dir.join("forecast_report.json"))?;
    report.write_per_step_csv(&rc.out_dir.join("per_step_mse.csv"))?;
    for s in &report.scores {
        println!(
            "{:>12}: mse {:.6}  mae {:.6}  pearson {}",
            s.model,
            s.mse,
            s.mae,
            s.pearson.map_or("n/a".into(), |p| format!("{p:.4}"))
        );
    }
    Ok(())
}

pub fn cmd_bench(args: BenchArgs) -> Result<()> {
    let rc = resolve_common(&args.common)?;
    ensure_out_dir(&rc.out_dir)?;
    let ls: Vec<usize> = args
        .grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad grid entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if ls.is_empty() {
        return Err(Error::Config("empty benchmark grid".into()));
    }
    let report = bench::time_scaling(&ls, args.window, args.dim, args.repeats)?;
    report.write_csv(&rc.out_dir.join("scaling_report.csv"))?;
    report.write_json(&rc.out_dir.join("scaling_report.json"))?;
    println!(
        "windowed slope {:.3} (r2 {:.3}), full slope {:.3} (r2 {:.3})",
        report.windowed_slope, report.windowed_r2, report.full_slope, report.full_r2
    );
    for (l, r) in &report.analytic_ratios {
        println!("L={l}: analytic full/windowed flop ratio {r:.1}");
    }
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let rc = resolve_common(&args.common)?;
    let kind: SynthKind = args.kind.parse()?;
    let ds = data::synth_generate(kind, args.n, args.variates, args.noise, rc.train.seed)?;
    let path = match &args.file {
        Some(f) => f.clone(),
        None => {
            ensure_out_dir(&rc.out_dir)?;
            rc.out_dir.join(format!("{}.csv", ds.name))
        }
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    ds.to_csv(&path)?;
    println!("wrote {} rows x {} variates to {}", ds.n(), ds.v(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_flags() {
        use std::io::Write as _;
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        let mut f = File::create(&cfg_path).unwrap();
        write!(
            f,
            "{{\"model.d\": 16, \"train.lr\": 0.01, \"horizon\": 8, \"model.segments\": 2}}"
        )
        .unwrap();
        drop(f);

        let mut rc = RunConfig::default();
        rc.apply_file(&cfg_path).unwrap();
        assert_eq!(rc.model.hidden, 16);
        assert_eq!(rc.train.lr, 0.01);
        // flag layer on top
        rc.train.lr = 0.5;
        assert_eq!(rc.train.lr, 0.5);
        rc.resolve_segment_len().unwrap();
        assert_eq!(rc.model.segment_len, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut rc = RunConfig::default();
        assert!(matches!(
            rc.apply_key("model.dd", &serde_json::json!(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn label_len_is_an_accepted_no_op() {
        let mut rc = RunConfig::default();
        let before = rc.flat_map();
        rc.apply_key("data.label_len", &serde_json::json!(48)).unwrap();
        assert_eq!(before, rc.flat_map());
    }

    #[test]
    fn horizon_must_divide_by_segments() {
        let mut rc = RunConfig::default();
        rc.horizon = 96;
        rc.model.segments = 4;
        rc.resolve_segment_len().unwrap();
        assert_eq!(rc.model.segment_len, 24);

        rc.horizon = 97;
        assert!(matches!(rc.resolve_segment_len(), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_ramp_fills_weights() {
        let mut rc = RunConfig::default();
        rc.horizon = 8;
        rc.model.segments = 2;
        rc.lambda_ramp = true;
        rc.resolve_segment_len().unwrap();
        assert_eq!(rc.model.lambda_weights, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.json");
        let mut rc = RunConfig::default();
        rc.model.hidden = 24;
        rc.train.epochs = 3;
        rc.horizon = 12;
        rc.write_resolved(&path).unwrap();

        let mut rc2 = RunConfig::default();
        rc2.apply_file(&path).unwrap();
        assert_eq!(rc2.model.hidden, 24);
        assert_eq!(rc2.train.epochs, 3);
        assert_eq!(rc2.horizon, 12);
    }

    #[test]
    fn exit_codes_distinguish_config_and_numeric() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Ingest("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
    }
}
