//! Forecast metrics and linear reference baselines.
//!
//! All functions here are pure over immutable inputs. The baselines are
//! the standard linear forecasting family: a single affine map from
//! lookback to horizon shared across variates, its trend/residual
//! decomposition variant (moving average kernel 25 with replicate
//! padding), and the last-value-anchored variant that subtracts the
//! final lookback value before a bias-free map and adds it back after.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tensor::Graph;
use crate::training::{adam_step, clip_gradients, AdamState, TrainConfig};

/// Mean squared error over all elements.
pub fn mse(pred: &Mat<f64>, truth: &Mat<f64>) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Mat<f64>, truth: &Mat<f64>) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

fn check_shapes(pred: &Mat<f64>, truth: &Mat<f64>) -> Result<()> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::Contract(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    if pred.rows() == 0 || pred.cols() == 0 {
        return Err(Error::Contract("empty prediction".into()));
    }
    Ok(())
}

/// Sample Pearson correlation per variate over the flattened horizon,
/// averaged across variates. Zero variance on either side makes the
/// correlation undefined.
pub fn pearson(pred: &Mat<f64>, truth: &Mat<f64>) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n = pred.rows() as f64;
    let mut sum_r = 0.0;
    for c in 0..pred.cols() {
        let (mut mp, mut mt) = (0.0, 0.0);
        for r in 0..pred.rows() {
            mp += pred.get(r, c);
            mt += truth.get(r, c);
        }
        mp /= n;
        mt /= n;
        let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
        for r in 0..pred.rows() {
            let dp = pred.get(r, c) - mp;
            let dt = truth.get(r, c) - mt;
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
        if vp <= 0.0 || vt <= 0.0 {
            return Err(Error::Correlation(format!(
                "variate {c} has zero variance"
            )));
        }
        sum_r += cov / (vp.sqrt() * vt.sqrt());
    }
    Ok(sum_r / pred.cols() as f64)
}

/// Naive forecaster: repeat the last observed row across the horizon.
pub fn persistence_baseline(lookback: &Mat<f64>, t_total: usize) -> Mat<f64> {
    let last = lookback.row(lookback.rows() - 1);
    Mat::from_fn(t_total, lookback.cols(), |_, c| last[c])
}

/// Centered moving average with replicate padding at both ends.
pub fn moving_average(series: &[f64], kernel: usize) -> Vec<f64> {
    let n = series.len();
    let half = (kernel - 1) / 2;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..kernel {
                let idx = (i + k) as isize - half as isize;
                let idx = idx.clamp(0, n as isize - 1) as usize;
                acc += series[idx];
            }
            acc / kernel as f64
        })
        .collect()
}

/// Flavor of linear baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    /// One affine [L -> T] map shared across variates.
    Linear,
    /// Moving-average trend/residual decomposition with separate
    /// linear heads, summed.
    DLinear,
    /// Subtract the last lookback value, apply a bias-free map, add
    /// the value back.
    NLinear,
}

impl std::str::FromStr for LinearKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(LinearKind::Linear),
            "dlinear" => Ok(LinearKind::DLinear),
            "nlinear" => Ok(LinearKind::NLinear),
            other => Err(Error::Config(format!("unknown linear baseline '{other}'"))),
        }
    }
}

impl std::fmt::Display for LinearKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinearKind::Linear => write!(f, "linear"),
            LinearKind::DLinear => write!(f, "dlinear"),
            LinearKind::NLinear => write!(f, "nlinear"),
        }
    }
}

pub const DECOMPOSITION_KERNEL: usize = 25;

/// A fitted linear forecaster.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    pub kind: LinearKind,
    pub lookback: usize,
    pub horizon: usize,
    /// Main map [L x T] (trend head for the decomposed kind).
    pub w: Vec<f64>,
    /// Bias [T]; empty for the anchored kind, which is bias-free.
    pub b: Vec<f64>,
    /// Residual head, decomposed kind only.
    pub w_res: Vec<f64>,
    pub b_res: Vec<f64>,
}

impl LinearBaseline {
    /// Zero-initialized baseline (predicts zero / pure anchor).
    pub fn zeros(kind: LinearKind, lookback: usize, horizon: usize) -> Self {
        let extra = kind == LinearKind::DLinear;
        LinearBaseline {
            kind,
            lookback,
            horizon,
            w: vec![0.0; lookback * horizon],
            b: if kind == LinearKind::NLinear {
                Vec::new()
            } else {
                vec![0.0; horizon]
            },
            w_res: if extra {
                vec![0.0; lookback * horizon]
            } else {
                Vec::new()
            },
            b_res: if extra { vec![0.0; horizon] } else { Vec::new() },
        }
    }

    /// Identity-initialized map for L == T: the output replays the
    /// lookback (construction check used by tests).
    pub fn identity(kind: LinearKind, len: usize) -> Self {
        let mut base = Self::zeros(kind, len, len);
        for i in 0..len {
            base.w[i * len + i] = 1.0;
        }
        base
    }

    fn apply_map(w: &[f64], b: &[f64], x: &[f64], horizon: usize) -> Vec<f64> {
        let l = x.len();
        let mut out = vec![0.0; horizon];
        for (t, o) in out.iter_mut().enumerate() {
            let mut acc = if b.is_empty() { 0.0 } else { b[t] };
            for i in 0..l {
                acc += w[i * horizon + t] * x[i];
            }
            *o = acc;
        }
        out
    }

    /// Forecast [T x V] from a lookback [L x V].
    pub fn predict(&self, lookback: &Mat<f64>) -> Result<Mat<f64>> {
        if lookback.rows() != self.lookback {
            return Err(Error::Contract(format!(
                "lookback has {} rows, baseline wants {}",
                lookback.rows(),
                self.lookback
            )));
        }
        let v = lookback.cols();
        let mut out = Mat::zeros(self.horizon, v);
        for c in 0..v {
            let col: Vec<f64> = (0..self.lookback).map(|r| lookback.get(r, c)).collect();
            let yhat = match self.kind {
                LinearKind::Linear => Self::apply_map(&self.w, &self.b, &col, self.horizon),
                LinearKind::DLinear => {
                    let trend = moving_average(&col, DECOMPOSITION_KERNEL);
                    let residual: Vec<f64> =
                        col.iter().zip(&trend).map(|(x, t)| x - t).collect();
                    let yt = Self::apply_map(&self.w, &self.b, &trend, self.horizon);
                    let yr = Self::apply_map(&self.w_res, &self.b_res, &residual, self.horizon);
                    yt.iter().zip(&yr).map(|(a, b)| a + b).collect()
                }
                LinearKind::NLinear => {
                    let last = col[self.lookback - 1];
                    let shifted: Vec<f64> = col.iter().map(|x| x - last).collect();
                    let y = Self::apply_map(&self.w, &self.b, &shifted, self.horizon);
                    y.iter().map(|v| v + last).collect()
                }
            };
            for (t, val) in yhat.iter().enumerate() {
                out.set(t, c, *val);
            }
        }
        Ok(out)
    }
}

/// Train a linear baseline on the given windows with the shared Adam
/// loop (same optimizer, clipping and batch semantics as the model).
pub fn fit_linear_baseline(
    kind: LinearKind,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<LinearBaseline> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Contract("no training windows for baseline".into()))?;
    let l = first.lookback.rows();
    let horizon = first.target.rows();
    let mut model = LinearBaseline::zeros(kind, l, horizon);
    let mut state = AdamState::new(&param_sizes(&model));
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let names = ["w", "b", "w_res", "b_res"];

    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = grads_like(&model);
            for &wi in batch {
                accumulate_window_grads(&mut grads, &model, &windows[wi])?;
            }
            let scale = 1.0 / batch.len() as f64;
            for gbuf in &mut grads {
                for g in gbuf.iter_mut() {
                    *g *= scale;
                }
            }
            let n_bufs = grads.len();
            clip_gradients(&mut grads, &names[..n_bufs], cfg.clip_norm)?;
            let mut bufs = params_mut(&mut model);
            adam_step(&mut bufs, &grads, &mut state, cfg)?;
        }
    }
    Ok(model)
}

fn param_sizes(m: &LinearBaseline) -> Vec<usize> {
    let mut v = vec![m.w.len(), m.b.len()];
    if m.kind == LinearKind::DLinear {
        v.push(m.w_res.len());
        v.push(m.b_res.len());
    }
    v
}

fn grads_like(m: &LinearBaseline) -> Vec<Vec<f64>> {
    param_sizes(m).iter().map(|&n| vec![0.0; n]).collect()
}

fn params_mut(m: &mut LinearBaseline) -> Vec<&mut Vec<f64>> {
    let mut v: Vec<&mut Vec<f64>> = vec![&mut m.w, &mut m.b];
    if m.kind == LinearKind::DLinear {
        v.push(&mut m.w_res);
        v.push(&mut m.b_res);
    }
    v
}

/// Per-window squared-error gradients via the recorded graph (summed
/// over time and variates, matching the model's loss reduction).
fn accumulate_window_grads(
    grads: &mut [Vec<f64>],
    model: &LinearBaseline,
    sample: &WindowSample,
) -> Result<()> {
    let l = model.lookback;
    let horizon = model.horizon;
    let v = sample.lookback.cols();

    let mut x = Mat::zeros(0, l);
    let mut x_res = Mat::zeros(0, l);
    let mut y = Mat::zeros(0, horizon);
    for c in 0..v {
        let col: Vec<f64> = (0..l).map(|r| sample.lookback.get(r, c)).collect();
        let mut target: Vec<f64> = (0..horizon).map(|t| sample.target.get(t, c)).collect();
        match model.kind {
            LinearKind::Linear => x.push_row(&col)?,
            LinearKind::DLinear => {
                let trend = moving_average(&col, DECOMPOSITION_KERNEL);
                let residual: Vec<f64> = col.iter().zip(&trend).map(|(a, b)| a - b).collect();
                x.push_row(&trend)?;
                x_res.push_row(&residual)?;
            }
            LinearKind::NLinear => {
                let last = col[l - 1];
                let shifted: Vec<f64> = col.iter().map(|a| a - last).collect();
                x.push_row(&shifted)?;
                for tv in target.iter_mut() {
                    *tv -= last;
                }
            }
        }
        y.push_row(&target)?;
    }

    let mut g = Graph::<f64>::new();
    let w = g.param(&model.w, &[l, horizon])?;
    let xt = g.input(x.data().to_vec(), &[v, l])?;
    let yt = g.input(y.data().to_vec(), &[v, horizon])?;
    let mut pred = g.matmul(&xt, &w)?;
    let b = if model.b.is_empty() {
        None
    } else {
        let bt = g.param(&model.b, &[horizon])?;
        pred = g.add_row_vec(&pred, &bt)?;
        Some(bt)
    };
    let (wr, br) = if model.kind == LinearKind::DLinear {
        let wr = g.param(&model.w_res, &[l, horizon])?;
        let br = g.param(&model.b_res, &[horizon])?;
        let xr = g.input(x_res.data().to_vec(), &[v, l])?;
        let pr = g.matmul(&xr, &wr)?;
        let pr = g.add_row_vec(&pr, &br)?;
        pred = g.add(&pred, &pr)?;
        (Some(wr), Some(br))
    } else {
        (None, None)
    };
    let diff = g.sub(&pred, &yt)?;
    let sq = g.mul(&diff, &diff)?;
    let loss = g.sum(&sq)?;
    g.backward(&loss)?;

    add_into(&mut grads[0], &g.grad_or_zero(&w));
    if let Some(bt) = &b {
        add_into(&mut grads[1], &g.grad_or_zero(bt));
    }
    if let (Some(wr), Some(br)) = (&wr, &br) {
        add_into(&mut grads[2], &g.grad_or_zero(wr));
        add_into(&mut grads[3], &g.grad_or_zero(br));
    }
    Ok(())
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// One scored forecaster in a report.
#[derive(Debug, Clone, Serialize)]
pub struct ModelScore {
    pub model: String,
    pub mse: f64,
    pub mae: f64,
    pub pearson: Option<f64>,
    pub runtime_seconds: f64,
}

/// Evaluation summary: overall scores plus a per-step error profile.
#[derive(Debug, Clone, Serialize)]
pub struct ForecastReport {
    pub horizon: usize,
    pub scores: Vec<ModelScore>,
    /// per_step_mse[m][t] = model m's mean squared error at step t
    pub per_step_mse: Vec<Vec<f64>>,
}

impl ForecastReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "model,mse,mae,pearson,runtime_seconds")?;
        for s in &self.scores {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.model,
                s.mse,
                s.mae,
                s.pearson.map_or(String::new(), |p| p.to_string()),
                s.runtime_seconds
            )?;
        }
        Ok(())
    }

    pub fn write_per_step_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = std::iter::once("step".to_string())
            .chain(self.scores.iter().map(|s| s.model.clone()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.horizon {
            let mut row = vec![t.to_string()];
            for m in &self.per_step_mse {
                row.push(m[t].to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Pool predictions across evaluation windows and score one model.
/// `preds` and `truths` hold one [T x V] pair per window.
pub fn score_windows(
    name: &str,
    preds: &[Mat<f64>],
    truths: &[Mat<f64>],
    runtime_seconds: f64,
) -> Result<(ModelScore, Vec<f64>)> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract("no windows to score".into()));
    }
    let horizon = preds[0].rows();
    let v = preds[0].cols();
    let mut pooled_p = Mat::zeros(0, v);
    let mut pooled_t = Mat::zeros(0, v);
    let mut per_step = vec![0.0; horizon];
    for (p, t) in preds.iter().zip(truths) {
        for r in 0..horizon {
            pooled_p.push_row(p.row(r))?;
            pooled_t.push_row(t.row(r))?;
            for c in 0..v {
                let d = p.get(r, c) - t.get(r, c);
                per_step[r] += d * d;
            }
        }
    }
    for s in per_step.iter_mut() {
        *s /= (preds.len() * v) as f64;
    }
    let score = ModelScore {
        model: name.to_string(),
        mse: mse(&pooled_p, &pooled_t)?,
        mae: mae(&pooled_p, &pooled_t)?,
        pearson: pearson(&pooled_p, &pooled_t).ok(),
        runtime_seconds,
    };
    Ok((score, per_step))
}
