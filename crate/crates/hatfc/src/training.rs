//! Hierarchical discounted loss, Adam with gradient clipping, and the
//! fit loop.
//!
//! The loss is Σ_h γ^(h-1) Σ_t λ_t ‖ŷ - y‖² summed over variates, with
//! the segment discount γ ∈ (0,1] and per-step weights λ. Across a
//! batch the reduction is the mean over samples (sums stay over time
//! and variates), which keeps the learning rate's meaning independent
//! of batch size.
//!
//! Fitting is single-writer over the parameters: batches fan sample
//! gradients out across threads in fixed-size chunks and merge them in
//! chunk order, so runs are bit-reproducible for a given seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autoregress::teacher_forced_graph;
use crate::data::{Region, SeriesDataset, WindowSample};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::mat::{cast, Mat};
use crate::model::{GraphParams, ModelConfig, ModelParams};
use crate::tensor::{real, Graph, Real, Tensor};
use crate::{autoregress, thread_pool};

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Condition on ground truth during training (default). When off,
    /// earlier segments feed the model its own differentiable
    /// predictions; steps inside a segment still use ground truth.
    pub teacher_forcing: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stride between training window origins.
    pub train_stride: usize,
    /// Stride for validation windows; 0 means the forecast horizon.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            clip_norm: 1.0,
            epochs: 10,
            batch_size: 128,
            seed: 0,
            teacher_forcing: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_stride: 1,
            val_stride: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_stride < 1 {
            return Err(Error::Config("train_stride must be >= 1".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Σ_h γ^(h-1) Σ_t λ_t ‖pred - truth‖² over variates. Zero exactly
/// when the prediction matches the truth.
pub fn hierarchical_loss<T: Real>(
    pred: &Mat<T>,
    truth: &Mat<T>,
    gamma_discount: f64,
    lambda: &[f64],
) -> Result<T> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::Contract(format!(
            "loss shapes differ: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    if !(gamma_discount > 0.0 && gamma_discount <= 1.0) {
        return Err(Error::Contract("gamma_discount must lie in (0, 1]".into()));
    }
    let seg_len = lambda.len();
    if seg_len == 0 || pred.rows() % seg_len != 0 {
        return Err(Error::Contract(format!(
            "{} prediction rows do not split into segments of {}",
            pred.rows(),
            seg_len
        )));
    }
    let mut loss = T::zero();
    for s in 0..pred.rows() {
        let seg = s / seg_len;
        let t = s % seg_len;
        let weight = real::<T>(gamma_discount.powi(seg as i32) * lambda[t]);
        let mut sq = T::zero();
        for c in 0..pred.cols() {
            let d = pred.get(s, c) - truth.get(s, c);
            sq = sq + d * d;
        }
        loss = loss + weight * sq;
    }
    Ok(loss)
}

/// Graph version of [`hierarchical_loss`] over per-step prediction
/// tensors (each 1×V); returns the scalar loss node.
pub fn hierarchical_loss_graph<T: Real>(
    g: &mut Graph<T>,
    preds: &[Tensor],
    truth: &Mat<T>,
    gamma_discount: f64,
    lambda: &[f64],
) -> Result<Tensor> {
    if preds.len() != truth.rows() {
        return Err(Error::Contract(format!(
            "{} prediction steps vs {} truth rows",
            preds.len(),
            truth.rows()
        )));
    }
    let seg_len = lambda.len();
    if seg_len == 0 || preds.len() % seg_len != 0 {
        return Err(Error::Contract("lambda length must divide the horizon".into()));
    }
    let mut total: Option<Tensor> = None;
    for (s, pred) in preds.iter().enumerate() {
        let seg = s / seg_len;
        let t = s % seg_len;
        let weight = real::<T>(gamma_discount.powi(seg as i32) * lambda[t]);
        let row = g.input(truth.row(s).to_vec(), &[1, truth.cols()])?;
        let diff = g.sub(pred, &row)?;
        let sq = g.mul(&diff, &diff)?;
        let sum = g.sum(&sq)?;
        let term = g.scale(&sum, weight)?;
        total = Some(match total {
            Some(acc) => g.add(&acc, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("loss over zero steps".into()))
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the applied factor, 1 when no clipping was needed.
pub fn clip_gradients<T: Real>(
    grads: &mut [Vec<T>],
    names: &[&str],
    max_norm: f64,
) -> Result<T> {
    let mut sq_sum = T::zero();
    for (i, buf) in grads.iter().enumerate() {
        for &g in buf {
            if !g.is_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
            sq_sum = sq_sum + g * g;
        }
    }
    let norm = sq_sum.sqrt();
    let limit = real::<T>(max_norm);
    if norm <= limit {
        return Ok(T::one());
    }
    let scale = limit / norm;
    for buf in grads.iter_mut() {
        for g in buf.iter_mut() {
            *g = *g * scale;
        }
    }
    Ok(scale)
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Deterministic given inputs.
pub fn adam_step<T: Real>(
    params: &mut [&mut Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let b1 = real::<T>(cfg.beta1);
    let b2 = real::<T>(cfg.beta2);
    let lr = real::<T>(cfg.lr);
    let eps = real::<T>(cfg.eps);
    let bc1 = T::one() - real::<T>(cfg.beta1.powi(state.step as i32));
    let bc2 = T::one() - real::<T>(cfg.beta2.powi(state.step as i32));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(Error::Contract("gradient/parameter size mismatch".into()));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let update = lr * mhat / (vhat.sqrt() + eps);
            if !update.is_finite() {
                return Err(Error::Numeric("non-finite optimizer update".into()));
            }
            p[i] = p[i] - update;
        }
    }
    Ok(())
}

/// One line of the training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

/// Everything `fit` produces: the trace, the best-validation weights,
/// and the final weights.
pub struct FitReport<T> {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub best_params: ModelParams<T>,
    pub final_params: ModelParams<T>,
    pub runtime_seconds: f64,
}

/// Summary serialized next to the CSV trace.
#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub final_train_loss: Option<f64>,
    pub num_params: usize,
    pub runtime_seconds: f64,
}

pub fn write_report_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_mse,val_mae")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_mse, r.val_mae)?;
    }
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &FitSummary) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), summary)?;
    Ok(())
}

/// Samples per parallel gradient chunk. Fixed so the merge order (and
/// therefore every float) is independent of the thread count.
const GRAD_CHUNK: usize = 8;

fn sample_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    sample: &WindowSample,
) -> Result<(f64, Vec<Vec<T>>)> {
    let x: Mat<T> = cast(&sample.lookback);
    let y: Mat<T> = cast(&sample.target);
    let mut g = Graph::<T>::new();
    let gp = GraphParams::register(&mut g, cfg, params)?;
    let preds = teacher_forced_graph(&mut g, &gp, cfg, &x, &y, !train.teacher_forcing)?;
    let loss = hierarchical_loss_graph(&mut g, &preds, &y, cfg.gamma_discount, &cfg.lambda())?;
    let loss_val = g.scalar_value(&loss);
    if !loss_val.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    g.backward(&loss)?;
    Ok((loss_val.to_f64().unwrap(), gp.gradients(&g)))
}

fn merge_grads<T: Real>(into: &mut [Vec<T>], from: &[Vec<T>]) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.iter_mut().zip(b) {
            *x = *x + *y;
        }
    }
}

/// Mean validation MSE/MAE of free-running forecasts over the region.
pub fn evaluate_region<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    dataset: &SeriesDataset,
    region: Region,
    stride: usize,
) -> Result<(f64, f64)> {
    let windows = dataset.window_iter(cfg.lookback, cfg.horizon(), stride, region)?;
    let pool = thread_pool();
    let results: Vec<Result<(f64, f64)>> = pool.install(|| {
        use rayon::prelude::*;
        windows
            .par_iter()
            .map(|w| {
                let x: Mat<T> = cast(&w.lookback);
                let pred = autoregress::generate(&x, params, cfg)?;
                let pred64 = pred.map(|v| v.to_f64().unwrap());
                Ok((
                    evaluation::mse(&pred64, &w.target)?,
                    evaluation::mae(&pred64, &w.target)?,
                ))
            })
            .collect()
    });
    let mut mse_sum = 0.0;
    let mut mae_sum = 0.0;
    let n = results.len() as f64;
    for r in results {
        let (m, a) = r?;
        mse_sum += m;
        mae_sum += a;
    }
    Ok((mse_sum / n, mae_sum / n))
}

/// Train on the dataset's training region, validating each epoch with
/// free-running forecasts and keeping the best-validation weights.
pub fn fit<T: Real>(
    dataset: &SeriesDataset,
    cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    train.validate()?;
    if dataset.v() != cfg.variates {
        return Err(Error::Config(format!(
            "dataset has {} variates, model wants {}",
            dataset.v(),
            cfg.variates
        )));
    }
    let started = Instant::now();
    let horizon = cfg.horizon();
    let windows = dataset.window_iter(cfg.lookback, horizon, train.train_stride, Region::Train)?;
    let val_stride = if train.val_stride == 0 { horizon } else { train.val_stride };

    let mut params = ModelParams::<T>::init(cfg, train.seed)?;
    let names: Vec<String> = params.tensors().iter().map(|v| v.name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|v| v.data.len()).collect();
    let mut adam = AdamState::<T>::new(&sizes);

    let mut records = Vec::with_capacity(train.epochs);
    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut rng = ChaCha12Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let pool = thread_pool();
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(train.batch_size).enumerate() {
            let chunk_results: Vec<Result<(f64, Vec<Vec<T>>)>> = pool.install(|| {
                use rayon::prelude::*;
                batch
                    .par_chunks(GRAD_CHUNK)
                    .map(|chunk| {
                        let mut acc: Option<(f64, Vec<Vec<T>>)> = None;
                        for &wi in chunk {
                            let (l, g) = sample_grads(&params, cfg, train, &windows[wi])?;
                            match &mut acc {
                                Some((ls, gs)) => {
                                    *ls += l;
                                    merge_grads(gs, &g);
                                }
                                None => acc = Some((l, g)),
                            }
                        }
                        Ok(acc.expect("non-empty chunk"))
                    })
                    .collect()
            });

            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            let mut batch_loss = 0.0;
            for r in chunk_results {
                let (l, g) = r.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (epoch {}, batch {})",
                        epoch + 1,
                        batch_idx + 1
                    )),
                    other => other,
                })?;
                batch_loss += l;
                merge_grads(&mut grads, &g);
            }
            let inv_b = real::<T>(1.0 / batch.len() as f64);
            for buf in &mut grads {
                for g in buf.iter_mut() {
                    *g = *g * inv_b;
                }
            }
            clip_gradients(&mut grads, &name_refs, train.clip_norm)?;
            let mut bufs = params.buffers_mut();
            adam_step(&mut bufs, &grads, &mut adam, train)?;

            loss_sum += batch_loss;
            seen += batch.len();
        }

        let train_loss = loss_sum / seen.max(1) as f64;
        let (val_mse, val_mae) = evaluate_region(&params, cfg, dataset, Region::Val, val_stride)?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_mse,
            val_mae,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_mse < *b);
        if improved {
            best = Some((epoch + 1, val_mse, params.clone()));
        }
    }

    let (best_epoch, best_val_mse, best_params) = match best {
        Some((e, m, p)) => (Some(e), m, p),
        None => (None, f64::INFINITY, params.clone()),
    };
    Ok(FitReport {
        epochs: records,
        best_epoch,
        best_val_mse,
        best_params,
        final_params: params,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}
