//! Two-level autoregressive generation.
//!
//! A forecast of K·H steps runs as K segment iterations. Each segment
//! first maps the context's final hidden state to H seed rows (segment
//! initialization), then refines one step at a time: the context plus
//! the step's seed row goes through the encoder, the output head reads
//! the seed position, and the refined prediction replaces the seed in
//! the committed output. The context only ever holds committed rows,
//! so prediction s is a deterministic function of the input and
//! predictions before s.
//!
//! Free-running generation re-encodes each step's reading cone from
//! scratch (no state is carried between steps); the cone slice is
//! bit-identical to encoding the whole context, which the tests pin
//! down. Teacher-forced training shares one encoder pass over the
//! ground-truth sequence and continues it per step with
//! [`model::seed_forward`]; the fixed-point test confirms both modes
//! produce the same bits.
//!
//! One state drives one sequence; independent sequences may generate
//! concurrently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{
    self, cone_margin, embed_input, encoder_with_trace, pe_constant, refine_step, segment_init,
    GraphParams, ModelConfig, ModelParams,
};
use crate::tensor::{real, Graph, Real, Tensor};

/// Progress of one forecast: the base input, every committed
/// prediction, the active segment's seed rows, and the cursor.
#[derive(Debug, Clone)]
pub struct GenerationState<T> {
    x: Mat<T>,
    committed: Mat<T>,
    seeds: Option<Mat<T>>,
    segment: usize,
    step: usize,
}

/// Serialized form of [`GenerationState`]; values round-trip through
/// f64 exactly for both precisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub lookback: Vec<f64>,
    pub committed: Vec<f64>,
    pub seeds: Option<Vec<f64>>,
    pub variates: usize,
    pub segment: usize,
    pub step: usize,
}

impl<T: Real> GenerationState<T> {
    pub fn new(x: Mat<T>, cfg: &ModelConfig) -> Result<Self> {
        if x.rows() != cfg.lookback || x.cols() != cfg.variates {
            return Err(Error::Contract(format!(
                "input is {}x{}, model expects {}x{}",
                x.rows(),
                x.cols(),
                cfg.lookback,
                cfg.variates
            )));
        }
        Ok(GenerationState {
            committed: Mat::zeros(0, x.cols()),
            x,
            seeds: None,
            segment: 0,
            step: 0,
        })
    }

    pub fn committed(&self) -> &Mat<T> {
        &self.committed
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self, cfg: &ModelConfig) -> bool {
        self.segment >= cfg.segments
    }

    /// Concatenation [X; committed] in temporal order. Never contains
    /// future slots.
    pub fn build_context(&self) -> Result<Mat<T>> {
        Mat::vstack(&[&self.x, &self.committed])
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            lookback: self.x.data().iter().map(|v| v.to_f64().unwrap()).collect(),
            committed: self
                .committed
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect(),
            seeds: self
                .seeds
                .as_ref()
                .map(|s| s.data().iter().map(|v| v.to_f64().unwrap()).collect()),
            variates: self.x.cols(),
            segment: self.segment,
            step: self.step,
        }
    }

    pub fn resume(snap: &StateSnapshot, cfg: &ModelConfig) -> Result<Self> {
        let v = snap.variates;
        if v != cfg.variates {
            return Err(Error::Contract("snapshot variate count mismatch".into()));
        }
        let x = Mat::from_vec(
            snap.lookback.len() / v,
            v,
            snap.lookback.iter().map(|&f| real::<T>(f)).collect(),
        )?;
        let committed = Mat::from_vec(
            snap.committed.len() / v,
            v,
            snap.committed.iter().map(|&f| real::<T>(f)).collect(),
        )?;
        let seeds = match &snap.seeds {
            Some(s) => Some(Mat::from_vec(
                cfg.segment_len,
                v,
                s.iter().map(|&f| real::<T>(f)).collect(),
            )?),
            None => None,
        };
        if x.rows() != cfg.lookback {
            return Err(Error::Contract("snapshot lookback length mismatch".into()));
        }
        Ok(GenerationState {
            x,
            committed,
            seeds,
            segment: snap.segment,
            step: snap.step,
        })
    }
}

/// Seed rows for the segment about to start: encoder over the current
/// context, segment initializer, output head. Zeros when the
/// initializer is ablated. The context is sliced to the final reading
/// cone, which leaves the result bit-identical.
fn compute_seeds<T: Real>(
    state: &GenerationState<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Mat<T>> {
    if !cfg.use_segment_init {
        return Ok(Mat::zeros(cfg.segment_len, cfg.variates));
    }
    let ctx = state.build_context()?;
    let keep = (cone_margin(cfg) + 1).min(ctx.rows());
    let sliced = ctx.slice_rows(ctx.rows() - keep, keep)?;

    let mut g = Graph::<T>::new();
    let gp = GraphParams::register(&mut g, cfg, params)?;
    let table = cfg.build_pe_table::<T>()?;
    let pe = pe_constant(&mut g, &table)?;
    let c = g.input(sliced.data().to_vec(), &[keep, cfg.variates])?;
    let emb = embed_input(&mut g, &gp, cfg, &c)?;
    let enc = model::encoder_forward(&mut g, &gp, cfg, &emb, &pe)?;
    let init = segment_init(&mut g, &gp, cfg, &enc)?;
    let seeds = model::output_head(&mut g, &gp, &init)?;
    Mat::from_vec(cfg.segment_len, cfg.variates, g.value(&seeds).to_vec())
}

/// Refine one step: context plus the step's seed row through the
/// encoder, prediction read at the seed position. `slice_cone` keeps
/// only the rows that can reach the prediction (bit-exact either way).
fn refine_once<T: Real>(
    state: &GenerationState<T>,
    seed_row: &[T],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    slice_cone: bool,
) -> Result<Vec<T>> {
    let ctx = state.build_context()?;
    let kept = if slice_cone {
        let keep = cone_margin(cfg).min(ctx.rows());
        ctx.slice_rows(ctx.rows() - keep, keep)?
    } else {
        ctx
    };
    let mut with_seed = kept;
    with_seed.push_row(seed_row)?;

    let mut g = Graph::<T>::new();
    let gp = GraphParams::register(&mut g, cfg, params)?;
    let table = cfg.build_pe_table::<T>()?;
    let pe = pe_constant(&mut g, &table)?;
    let c = g.input(with_seed.data().to_vec(), &[with_seed.rows(), cfg.variates])?;
    let pred = refine_step(&mut g, &gp, cfg, &c, &pe)?;
    Ok(g.value(&pred).to_vec())
}

fn blend_ema<T: Real>(cfg: &ModelConfig, refined: &[T], seed: &[T]) -> Vec<T> {
    if cfg.ema_coeff == 0.0 {
        return refined.to_vec();
    }
    let e = real::<T>(cfg.ema_coeff);
    let one_m = T::one() - e;
    refined
        .iter()
        .zip(seed)
        .map(|(&r, &s)| one_m * r + e * s)
        .collect()
}

/// Advance the state by one refined step.
pub(crate) fn advance<T: Real>(
    state: &mut GenerationState<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    slice_cone: bool,
) -> Result<()> {
    if state.is_done(cfg) {
        return Err(Error::Contract("generation already complete".into()));
    }
    if state.step == 0 {
        state.seeds = Some(compute_seeds(state, params, cfg)?);
    }
    let seeds = state.seeds.as_ref().expect("seeds set at segment start");
    let seed_row = seeds.row(state.step).to_vec();
    let refined = refine_once(state, &seed_row, params, cfg, slice_cone)?;
    let committed_row = blend_ema(cfg, &refined, &seed_row);
    if committed_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite prediction at segment {} step {} (global step {})",
            state.segment + 1,
            state.step + 1,
            state.segment * cfg.segment_len + state.step + 1
        )));
    }
    state.committed.push_row(&committed_row)?;
    state.step += 1;
    if state.step == cfg.segment_len {
        state.step = 0;
        state.segment += 1;
        state.seeds = None;
    }
    Ok(())
}

/// Advance a state by one refined step (segment seeds are computed on
/// segment entry). Public single-step driver for inspection loops.
pub fn step<T: Real>(
    state: &mut GenerationState<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<()> {
    advance(state, params, cfg, true)
}

/// Free-running forecast of K·H steps. Prediction at global step s is
/// a deterministic function of `x` and the predictions before s.
pub fn generate<T: Real>(
    x: &Mat<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Mat<T>> {
    let mut state = GenerationState::new(x.clone(), cfg)?;
    while !state.is_done(cfg) {
        advance(&mut state, params, cfg, true)?;
    }
    Ok(state.committed)
}

/// Continue a (possibly mid-stream) state to completion and return the
/// full committed horizon.
pub fn generate_from<T: Real>(
    mut state: GenerationState<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Mat<T>> {
    while !state.is_done(cfg) {
        advance(&mut state, params, cfg, true)?;
    }
    Ok(state.committed)
}

/// Same control flow as [`generate`], but the context extends with
/// ground-truth rows instead of the model's own predictions. With
/// `y_true` equal to the free-running output the result matches
/// [`generate`] bit for bit.
pub fn teacher_forced_forward<T: Real>(
    x: &Mat<T>,
    y_true: &Mat<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Mat<T>> {
    let mut g = Graph::<T>::new();
    let gp = GraphParams::register(&mut g, cfg, params)?;
    let preds = teacher_forced_graph(&mut g, &gp, cfg, x, y_true, false)?;
    let mut out = Mat::zeros(0, cfg.variates);
    for p in &preds {
        out.push_row(g.value(p))?;
    }
    Ok(out)
}

/// Build the teacher-forced forward pass on an existing record and
/// return the K·H step predictions as graph tensors (for the loss).
///
/// With `free_running_segments` the context rows of earlier segments
/// are the model's own (differentiable) predictions; steps inside a
/// segment always condition on ground truth.
pub fn teacher_forced_graph<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    x: &Mat<T>,
    y_true: &Mat<T>,
    free_running_segments: bool,
) -> Result<Vec<Tensor>> {
    if x.rows() != cfg.lookback || x.cols() != cfg.variates {
        return Err(Error::Contract(format!(
            "input is {}x{}, model expects {}x{}",
            x.rows(),
            x.cols(),
            cfg.lookback,
            cfg.variates
        )));
    }
    if y_true.rows() != cfg.horizon() || y_true.cols() != cfg.variates {
        return Err(Error::Contract(format!(
            "targets are {}x{}, horizon is {}x{}",
            y_true.rows(),
            y_true.cols(),
            cfg.horizon(),
            cfg.variates
        )));
    }

    let table = cfg.build_pe_table::<T>()?;
    let pe = pe_constant(g, &table)?;

    if !free_running_segments {
        let full = Mat::vstack(&[x, y_true])?;
        let x_node = g.input(full.data().to_vec(), &[full.rows(), cfg.variates])?;
        run_over_sequence(g, gp, cfg, &pe, &x_node, 0, cfg.segments)
    } else {
        let x_node = g.input(x.data().to_vec(), &[cfg.lookback, cfg.variates])?;
        let mut committed: Vec<Tensor> = Vec::with_capacity(cfg.horizon());
        let mut preds = Vec::with_capacity(cfg.horizon());
        for h in 0..cfg.segments {
            let y_seg = y_true.slice_rows(h * cfg.segment_len, cfg.segment_len)?;
            let y_node = g.input(y_seg.data().to_vec(), &[cfg.segment_len, cfg.variates])?;
            let mut parts: Vec<&Tensor> = vec![&x_node];
            parts.extend(committed.iter());
            parts.push(&y_node);
            let seq = g.concat_rows(&parts)?;
            let seg_preds = run_over_sequence(g, gp, cfg, &pe, &seq, h, 1)?;
            committed.extend(seg_preds.iter().cloned());
            preds.extend(seg_preds);
        }
        Ok(preds)
    }
}

/// Shared encoder pass over `seq` (value space, rows covering the
/// lookback plus first+n segments of targets) producing refined
/// predictions for segments `first..first+n`.
///
/// The pass is restricted to the suffix the predictions' reading cones
/// can reach; features outside the cones are never read, so the
/// restriction is exact.
fn run_over_sequence<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    pe: &Tensor,
    seq: &Tensor,
    first_segment: usize,
    n_segments: usize,
) -> Result<Vec<Tensor>> {
    let l = cfg.lookback;
    let seg_len = cfg.segment_len;
    let margin = cone_margin(cfg);
    // earliest top-block read: the first covered segment's init position
    let need_from = l + first_segment * seg_len - 1;
    let base = need_from.saturating_sub(margin);
    let seq_rows = seq.shape()[0];
    let suffix = g.slice_rows(seq, base, seq_rows - base)?;

    let emb = embed_input(g, gp, cfg, &suffix)?;
    let (enc, traces) = encoder_with_trace(g, gp, cfg, &emb, pe)?;

    let mut preds = Vec::with_capacity(n_segments * seg_len);
    for seg in first_segment..first_segment + n_segments {
        let seeds = if cfg.use_segment_init {
            let read_local = l + seg * seg_len - 1 - base;
            let last = g.slice_rows(&enc, read_local, 1)?;
            let flat = {
                let y = g.matmul(&last, &gp.seg_head.0)?;
                g.add_row_vec(&y, &gp.seg_head.1)?
            };
            let block = flat.reshape(&[cfg.segment_len, cfg.hidden])?;
            model::output_head(g, gp, &block)?
        } else {
            g.input(
                vec![T::zero(); cfg.segment_len * cfg.variates],
                &[cfg.segment_len, cfg.variates],
            )?
        };
        for t in 0..seg_len {
            let s = seg * seg_len + t;
            let pos = l + s;
            let seed_val = g.slice_rows(&seeds, t, 1)?;
            let seed_emb = embed_input(g, gp, cfg, &seed_val)?;
            let feat = model::seed_forward(g, gp, cfg, &traces, &seed_emb, pos, base)?;
            let mut pred = model::output_head(g, gp, &feat)?;
            if cfg.ema_coeff > 0.0 {
                let e = real::<T>(cfg.ema_coeff);
                let a = g.scale(&pred, T::one() - e)?;
                let b = g.scale(&seed_val, e)?;
                pred = g.add(&a, &b)?;
            }
            preds.push(pred);
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests;
