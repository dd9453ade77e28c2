//! The enhanced transformer stack.
//!
//! An encoder block is windowed multi-head attention followed by a
//! feed-forward layer, each behind an add-and-norm. The segment
//! initializer maps the final context hidden state to an H×d block; the
//! step refiner runs the encoder over a value-space context and applies
//! the output head to the last position. Parameters are immutable
//! during forward passes, so concurrent inference over distinct records
//! is safe; training is single-writer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::WindowSpec;
use crate::encoding::RelPosTable;
use crate::error::{Error, Result};
use crate::tensor::{real, Graph, Real, Tensor};

pub mod checkpoint;

/// Architecture hyperparameters.
///
/// `segment_len` (H) and `segments` (K) give the total horizon K·H.
/// `lambda_weights` holds the per-step loss weights; empty means all
/// ones. `ema_coeff` blends each refined step prediction with its
/// segment-initializer seed (0 disables it, the default).
/// `use_segment_init` is the ablation switch for the initializer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub segment_len: usize,
    pub segments: usize,
    pub window: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_blocks: usize,
    pub variates: usize,
    pub gamma_discount: f64,
    #[serde(default)]
    pub lambda_weights: Vec<f64>,
    #[serde(default)]
    pub ema_coeff: f64,
    #[serde(default = "default_true")]
    pub use_segment_init: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 336,
            segment_len: 48,
            segments: 2,
            window: 32,
            hidden: 64,
            heads: 3,
            d_k: 128,
            d_v: 128,
            n_blocks: 2,
            variates: 7,
            gamma_discount: 1.0,
            lambda_weights: Vec::new(),
            ema_coeff: 0.0,
            use_segment_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lookback", self.lookback),
            ("segment_len", self.segment_len),
            ("segments", self.segments),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("variates", self.variates),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window must be >= 2, got {}",
                self.window
            )));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden dimension must be even and >= 2 (layer norm and position encodings), got {}",
                self.hidden
            )));
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount <= 1.0) {
            return Err(Error::Config(format!(
                "gamma_discount must lie in (0, 1], got {}",
                self.gamma_discount
            )));
        }
        if !self.lambda_weights.is_empty() {
            if self.lambda_weights.len() != self.segment_len {
                return Err(Error::Config(format!(
                    "lambda_weights has {} entries, segment length is {}",
                    self.lambda_weights.len(),
                    self.segment_len
                )));
            }
            if self.lambda_weights.iter().any(|&l| l <= 0.0) {
                return Err(Error::Config("lambda_weights must be > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.ema_coeff) {
            return Err(Error::Config(format!(
                "ema_coeff must lie in [0, 1), got {}",
                self.ema_coeff
            )));
        }
        Ok(())
    }

    /// Total forecast horizon K·H.
    pub fn horizon(&self) -> usize {
        self.segments * self.segment_len
    }

    /// Per-step loss weights; all ones unless configured.
    pub fn lambda(&self) -> Vec<f64> {
        if self.lambda_weights.is_empty() {
            vec![1.0; self.segment_len]
        } else {
            self.lambda_weights.clone()
        }
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window)
    }

    /// Effective window span floor(W/2) + 1.
    pub fn w_eff(&self) -> usize {
        self.window / 2 + 1
    }

    /// Feed-forward inner width (expansion factor 4).
    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    /// Position table covering every in-window offset, at the hidden
    /// dimension; blocks project it into key space.
    pub fn build_pe_table<T: Real>(&self) -> Result<RelPosTable<T>> {
        RelPosTable::build(self.w_eff() - 1, self.hidden)
    }
}

/// Affine map with explicit dimensions; weights are in×out row-major.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Linear<T> {
    fn init(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| real::<T>(rng.gen_range(-bound..bound)))
            .collect();
        let b = (0..out_dim)
            .map(|_| real::<T>(rng.gen_range(-bound..bound)))
            .collect();
        Linear { w, b, in_dim, out_dim }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: vec![T::zero(); in_dim * out_dim],
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }
}

/// One encoder block's learnable state.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_out: Linear<T>,
    /// Position encodings enter key space through this d×d_k map,
    /// shared across heads.
    pub pe_proj: Vec<T>,
    /// One unconstrained decay parameter per head; γ = softplus(raw).
    pub raw_gamma: Vec<T>,
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
}

impl<T: Real> BlockParams<T> {
    fn init(rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        // softplus(raw) = 0.1 starts near-uniform over a 32-step window
        let raw_gamma_init = real::<T>((0.1f64.exp() - 1.0).ln());
        BlockParams {
            w_q: Linear::init(rng, d, cfg.heads * cfg.d_k),
            w_k: Linear::init(rng, d, cfg.heads * cfg.d_k),
            w_v: Linear::init(rng, d, cfg.heads * cfg.d_v),
            w_out: Linear::init(rng, cfg.heads * cfg.d_v, d),
            pe_proj: (0..d * cfg.d_k)
                .map(|_| real::<T>(rng.gen_range(-bound..bound)))
                .collect(),
            raw_gamma: vec![raw_gamma_init; cfg.heads],
            ln1_gain: vec![T::one(); d],
            ln1_bias: vec![T::zero(); d],
            ffn1: Linear::init(rng, d, cfg.ffn_dim()),
            ffn2: Linear::init(rng, cfg.ffn_dim(), d),
            ln2_gain: vec![T::one(); d],
            ln2_bias: vec![T::zero(); d],
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        BlockParams {
            w_q: Linear::zeros(d, cfg.heads * cfg.d_k),
            w_k: Linear::zeros(d, cfg.heads * cfg.d_k),
            w_v: Linear::zeros(d, cfg.heads * cfg.d_v),
            w_out: Linear::zeros(cfg.heads * cfg.d_v, d),
            pe_proj: vec![T::zero(); d * cfg.d_k],
            raw_gamma: vec![T::zero(); cfg.heads],
            ln1_gain: vec![T::one(); d],
            ln1_bias: vec![T::zero(); d],
            ffn1: Linear::zeros(d, cfg.ffn_dim()),
            ffn2: Linear::zeros(cfg.ffn_dim(), d),
            ln2_gain: vec![T::one(); d],
            ln2_bias: vec![T::zero(); d],
        }
    }
}

/// All learnable weights of the forecaster.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub input_proj: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub seg_head: Linear<T>,
    pub out_head: Linear<T>,
}

/// Named view of one parameter tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

fn push_lin<'a, T>(out: &mut Vec<ParamView<'a, T>>, name: &str, l: &'a Linear<T>) {
    out.push(ParamView {
        name: format!("{name}.w"),
        shape: vec![l.in_dim, l.out_dim],
        data: &l.w,
    });
    out.push(ParamView {
        name: format!("{name}.b"),
        shape: vec![l.out_dim],
        data: &l.b,
    });
}

fn push_lin_mut<'a, T>(out: &mut Vec<&'a mut Vec<T>>, l: &'a mut Linear<T>) {
    out.push(&mut l.w);
    out.push(&mut l.b);
}

impl<T: Real> ModelParams<T> {
    /// Seeded uniform fan-in initialization; layer norms start at
    /// gain 1 / bias 0 and every decay starts at softplus(raw) = 0.1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(ModelParams {
            input_proj: Linear::init(&mut rng, cfg.variates, cfg.hidden),
            blocks: (0..cfg.n_blocks)
                .map(|_| BlockParams::init(&mut rng, cfg))
                .collect(),
            seg_head: Linear::init(&mut rng, cfg.hidden, cfg.segment_len * cfg.hidden),
            out_head: Linear::init(&mut rng, cfg.hidden, cfg.variates),
        })
    }

    /// All-zero weights with the right shapes (tests, hand-set weights).
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            input_proj: Linear::zeros(cfg.variates, cfg.hidden),
            blocks: (0..cfg.n_blocks).map(|_| BlockParams::zeros(cfg)).collect(),
            seg_head: Linear::zeros(cfg.hidden, cfg.segment_len * cfg.hidden),
            out_head: Linear::zeros(cfg.hidden, cfg.variates),
        })
    }

    /// Named tensors in the canonical (checkpoint and optimizer) order.
    pub fn tensors(&self) -> Vec<ParamView<'_, T>> {
        let d = self.input_proj.out_dim;
        let mut out = Vec::new();
        push_lin(&mut out, "input_proj", &self.input_proj);
        for (i, b) in self.blocks.iter().enumerate() {
            let dk = b.w_q.out_dim / b.raw_gamma.len();
            push_lin(&mut out, &format!("blocks.{i}.w_q"), &b.w_q);
            push_lin(&mut out, &format!("blocks.{i}.w_k"), &b.w_k);
            push_lin(&mut out, &format!("blocks.{i}.w_v"), &b.w_v);
            push_lin(&mut out, &format!("blocks.{i}.w_out"), &b.w_out);
            out.push(ParamView {
                name: format!("blocks.{i}.pe_proj"),
                shape: vec![d, dk],
                data: &b.pe_proj,
            });
            out.push(ParamView {
                name: format!("blocks.{i}.raw_gamma"),
                shape: vec![b.raw_gamma.len()],
                data: &b.raw_gamma,
            });
            for (suffix, data) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
            ] {
                out.push(ParamView {
                    name: format!("blocks.{i}.{suffix}"),
                    shape: vec![data.len()],
                    data,
                });
            }
            push_lin(&mut out, &format!("blocks.{i}.ffn1"), &b.ffn1);
            push_lin(&mut out, &format!("blocks.{i}.ffn2"), &b.ffn2);
        }
        push_lin(&mut out, "seg_head", &self.seg_head);
        push_lin(&mut out, "out_head", &self.out_head);
        out
    }

    /// Mutable buffers in the same canonical order as [`Self::tensors`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        push_lin_mut(&mut out, &mut self.input_proj);
        for b in &mut self.blocks {
            push_lin_mut(&mut out, &mut b.w_q);
            push_lin_mut(&mut out, &mut b.w_k);
            push_lin_mut(&mut out, &mut b.w_v);
            push_lin_mut(&mut out, &mut b.w_out);
            out.push(&mut b.pe_proj);
            out.push(&mut b.raw_gamma);
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            push_lin_mut(&mut out, &mut b.ffn1);
            push_lin_mut(&mut out, &mut b.ffn2);
        }
        push_lin_mut(&mut out, &mut self.seg_head);
        push_lin_mut(&mut out, &mut self.out_head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Finiteness scan; names the first offending tensor.
    pub fn check_finite(&self) -> Result<()> {
        for view in self.tensors() {
            if view.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {} contains non-finite values",
                    view.name
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for one registered copy of the parameters. Forwards
/// reuse the handles, so gradients accumulate across every use and can
/// be read back in canonical order after `backward`.
pub struct GraphParams {
    pub input_proj: (Tensor, Tensor),
    pub blocks: Vec<GraphBlock>,
    pub seg_head: (Tensor, Tensor),
    pub out_head: (Tensor, Tensor),
}

pub struct GraphBlock {
    pub w_q: (Tensor, Tensor),
    pub w_k: (Tensor, Tensor),
    pub w_v: (Tensor, Tensor),
    pub w_out: (Tensor, Tensor),
    pub pe_proj: Tensor,
    pub raw_gamma: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn1: (Tensor, Tensor),
    pub ffn2: (Tensor, Tensor),
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

fn apply_lin<T: Real>(g: &mut Graph<T>, p: &(Tensor, Tensor), x: &Tensor) -> Result<Tensor> {
    let y = g.matmul(x, &p.0)?;
    g.add_row_vec(&y, &p.1)
}

/// Number of parameter tensors for a given depth.
fn tensor_count(n_blocks: usize) -> usize {
    2 + n_blocks * 18 + 4
}

impl GraphParams {
    /// Register every parameter buffer on the record in canonical order.
    pub fn register<T: Real>(
        g: &mut Graph<T>,
        cfg: &ModelConfig,
        p: &ModelParams<T>,
    ) -> Result<Self> {
        let tensors: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|v| g.param(v.data, &v.shape))
            .collect::<Result<_>>()?;
        Self::from_tensors(cfg, &tensors)
    }

    /// Assemble the wiring from already-registered tensors laid out in
    /// the canonical [`ModelParams::tensors`] order. This is what lets
    /// gradient checks drive the whole model from flat buffers.
    pub fn from_tensors(cfg: &ModelConfig, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != tensor_count(cfg.n_blocks) {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                tensor_count(cfg.n_blocks),
                tensors.len()
            )));
        }
        fn one(it: &mut std::vec::IntoIter<Tensor>) -> Tensor {
            it.next().expect("tensor count checked")
        }
        fn pair(it: &mut std::vec::IntoIter<Tensor>) -> (Tensor, Tensor) {
            (one(it), one(it))
        }
        let mut it = tensors.to_vec().into_iter();
        let input_proj = pair(&mut it);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let w_q = pair(&mut it);
            let w_k = pair(&mut it);
            let w_v = pair(&mut it);
            let w_out = pair(&mut it);
            let pe_proj = one(&mut it);
            let raw_gamma = one(&mut it).reshape(&[cfg.heads, 1])?;
            let ln1_gain = one(&mut it);
            let ln1_bias = one(&mut it);
            let ln2_gain = one(&mut it);
            let ln2_bias = one(&mut it);
            let ffn1 = pair(&mut it);
            let ffn2 = pair(&mut it);
            blocks.push(GraphBlock {
                w_q,
                w_k,
                w_v,
                w_out,
                pe_proj,
                raw_gamma,
                ln1_gain,
                ln1_bias,
                ffn1,
                ffn2,
                ln2_gain,
                ln2_bias,
            });
        }
        let seg_head = pair(&mut it);
        let out_head = pair(&mut it);
        Ok(GraphParams {
            input_proj,
            blocks,
            seg_head,
            out_head,
        })
    }

    /// Gradients in canonical parameter order, zeros where the loss
    /// never reached a tensor.
    pub fn gradients<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        fn grad_lin<T: Real>(out: &mut Vec<Vec<T>>, g: &Graph<T>, p: &(Tensor, Tensor)) {
            out.push(g.grad_or_zero(&p.0));
            out.push(g.grad_or_zero(&p.1));
        }
        let mut out = Vec::new();
        grad_lin(&mut out, g, &self.input_proj);
        for b in &self.blocks {
            grad_lin(&mut out, g, &b.w_q);
            grad_lin(&mut out, g, &b.w_k);
            grad_lin(&mut out, g, &b.w_v);
            grad_lin(&mut out, g, &b.w_out);
            out.push(g.grad_or_zero(&b.pe_proj));
            out.push(g.grad_or_zero(&b.raw_gamma));
            out.push(g.grad_or_zero(&b.ln1_gain));
            out.push(g.grad_or_zero(&b.ln1_bias));
            out.push(g.grad_or_zero(&b.ln2_gain));
            out.push(g.grad_or_zero(&b.ln2_bias));
            grad_lin(&mut out, g, &b.ffn1);
            grad_lin(&mut out, g, &b.ffn2);
        }
        grad_lin(&mut out, g, &self.seg_head);
        grad_lin(&mut out, g, &self.out_head);
        out
    }
}

/// Per-timestep affine projection into hidden space; no temporal
/// mixing, so row t depends only on x[t].
pub fn embed_input<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    x: &Tensor,
) -> Result<Tensor> {
    match x.shape() {
        [_, v] if *v == cfg.variates => {}
        other => {
            return Err(Error::Dim(format!(
                "input shape {other:?} does not match {} variates",
                cfg.variates
            )))
        }
    }
    apply_lin(g, &gp.input_proj, x)
}

/// Per-block tensors retained from an encoder pass so later rows can
/// attend into it without recomputation.
pub struct BlockTrace {
    /// Per-head key matrices [T × d_k] at this block's input.
    pub k_heads: Vec<Tensor>,
    /// Per-head value matrices [T × d_v].
    pub v_heads: Vec<Tensor>,
    /// Position rows projected into this block's key space.
    pub pe_k: Tensor,
    /// softplus(raw_gamma) per head.
    pub gammas: Vec<Tensor>,
}

/// `n_blocks` of (windowed attention → add&norm → FFN → add&norm),
/// strictly causal end to end. `pe` holds the raw hidden-dim position
/// rows; each block projects them into its own key space.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    h: &Tensor,
    pe: &Tensor,
) -> Result<Tensor> {
    encoder_with_trace(g, gp, cfg, h, pe).map(|(out, _)| out)
}

/// [`encoder_forward`] that also hands back each block's keys, values,
/// decay and position tensors for single-row continuation.
pub fn encoder_with_trace<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    h: &Tensor,
    pe: &Tensor,
) -> Result<(Tensor, Vec<BlockTrace>)> {
    let t_len = match h.shape() {
        [t, d] if *d == cfg.hidden => *t,
        other => {
            return Err(Error::Dim(format!(
                "encoder input shape {other:?}, hidden is {}",
                cfg.hidden
            )))
        }
    };
    if t_len == 0 {
        return Err(Error::Contract("encoder over an empty sequence".into()));
    }
    let w_eff = cfg.w_eff();
    let mut h = h.clone();
    let mut traces = Vec::with_capacity(gp.blocks.len());
    for b in &gp.blocks {
        let pe_k = g.matmul(pe, &b.pe_proj)?;
        let q_all = apply_lin(g, &b.w_q, &h)?;
        let k_all = apply_lin(g, &b.w_k, &h)?;
        let v_all = apply_lin(g, &b.w_v, &h)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        let mut k_heads = Vec::with_capacity(cfg.heads);
        let mut v_heads = Vec::with_capacity(cfg.heads);
        let mut gammas = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let q = g.slice_cols(&q_all, hh * cfg.d_k, cfg.d_k)?;
            let k = g.slice_cols(&k_all, hh * cfg.d_k, cfg.d_k)?;
            let v = g.slice_cols(&v_all, hh * cfg.d_v, cfg.d_v)?;
            let raw = g.slice_rows(&b.raw_gamma, hh, 1)?;
            let gamma = g.softplus(&raw)?;
            let band = g.banded_qk(&q, &k, &pe_k, &gamma, w_eff)?;
            let weights = g.banded_softmax(&band)?;
            head_outs.push(g.banded_av(&weights, &v)?);
            k_heads.push(k);
            v_heads.push(v);
            gammas.push(gamma);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let concat = g.concat_cols(&refs)?;
        let attn = apply_lin(g, &b.w_out, &concat)?;
        let res1 = g.add(&h, &attn)?;
        h = g.layer_norm(&res1, &b.ln1_gain, &b.ln1_bias)?;
        let ff1 = apply_lin(g, &b.ffn1, &h)?;
        let act = g.silu(&ff1)?;
        let ff2 = apply_lin(g, &b.ffn2, &act)?;
        let res2 = g.add(&h, &ff2)?;
        h = g.layer_norm(&res2, &b.ln2_gain, &b.ln2_bias)?;
        traces.push(BlockTrace {
            k_heads,
            v_heads,
            pe_k,
            gammas,
        });
    }
    Ok((h, traces))
}

/// Push a single embedded row through the encoder blocks, attending
/// into an existing pass. The row sits at global position `pos`; the
/// traced pass covers global positions `base..base + T`. Produces the
/// same bits as a full encoder pass over the context ending at `pos`.
pub fn seed_forward<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    traces: &[BlockTrace],
    seed_embed: &Tensor,
    pos: usize,
    base: usize,
) -> Result<Tensor> {
    if seed_embed.shape() != [1, cfg.hidden] {
        return Err(Error::Dim(format!(
            "seed row shape {:?}, expected [1, {}]",
            seed_embed.shape(),
            cfg.hidden
        )));
    }
    let w_eff = cfg.w_eff();
    let win_len = w_eff.min(pos + 1);
    let n_shared = win_len - 1;
    if pos < base + n_shared {
        return Err(Error::Contract(format!(
            "seed window at position {pos} reaches before traced base {base}"
        )));
    }
    let lo_local = pos - n_shared - base;
    let mut feat = seed_embed.clone();
    for (b, trace) in gp.blocks.iter().zip(traces) {
        let q_all = apply_lin(g, &b.w_q, &feat)?;
        let k_all = apply_lin(g, &b.w_k, &feat)?;
        let v_all = apply_lin(g, &b.w_v, &feat)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let q = g.slice_cols(&q_all, hh * cfg.d_k, cfg.d_k)?;
            let k_seed = g.slice_cols(&k_all, hh * cfg.d_k, cfg.d_k)?;
            let v_seed = g.slice_cols(&v_all, hh * cfg.d_v, cfg.d_v)?;
            head_outs.push(g.row_attend(
                &q,
                &trace.k_heads[hh],
                &trace.v_heads[hh],
                &k_seed,
                &v_seed,
                &trace.pe_k,
                &trace.gammas[hh],
                lo_local,
                n_shared,
            )?);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let concat = g.concat_cols(&refs)?;
        let attn = apply_lin(g, &b.w_out, &concat)?;
        let res1 = g.add(&feat, &attn)?;
        let h1 = g.layer_norm(&res1, &b.ln1_gain, &b.ln1_bias)?;
        let ff1 = apply_lin(g, &b.ffn1, &h1)?;
        let act = g.silu(&ff1)?;
        let ff2 = apply_lin(g, &b.ffn2, &act)?;
        let res2 = g.add(&h1, &ff2)?;
        feat = g.layer_norm(&res2, &b.ln2_gain, &b.ln2_bias)?;
    }
    Ok(feat)
}

/// Rows a position's reading cone reaches back through the encoder:
/// window span minus one per block.
pub fn cone_margin(cfg: &ModelConfig) -> usize {
    cfg.n_blocks * (cfg.w_eff() - 1)
}

/// Map the final context hidden state through the d → H·d head and
/// reshape to H×d. Deterministic; depends only on the last row.
pub fn segment_init<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    ctx_hidden: &Tensor,
) -> Result<Tensor> {
    let tc = match ctx_hidden.shape() {
        [t, d] if *d == cfg.hidden => *t,
        other => return Err(Error::Dim(format!("segment_init input shape {other:?}"))),
    };
    if tc == 0 {
        return Err(Error::Contract("segment_init on an empty context".into()));
    }
    let last = g.slice_rows(ctx_hidden, tc - 1, 1)?;
    let flat = apply_lin(g, &gp.seg_head, &last)?;
    flat.reshape(&[cfg.segment_len, cfg.hidden])
}

/// Full refinement pipeline over a value-space context: embed, encode,
/// read the last position, project to variates. Returns 1×V.
pub fn refine_step<T: Real>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    context: &Tensor,
    pe: &Tensor,
) -> Result<Tensor> {
    let tc = match context.shape() {
        [t, v] if *v == cfg.variates => *t,
        other => return Err(Error::Dim(format!("refine_step context shape {other:?}"))),
    };
    if tc == 0 {
        return Err(Error::Contract("refine_step on an empty context".into()));
    }
    let embedded = embed_input(g, gp, cfg, context)?;
    let encoded = encoder_forward(g, gp, cfg, &embedded, pe)?;
    let last = g.slice_rows(&encoded, tc - 1, 1)?;
    apply_lin(g, &gp.out_head, &last)
}

/// Apply the output head to hidden rows: [n×d] → [n×V].
pub fn output_head<T: Real>(g: &mut Graph<T>, gp: &GraphParams, h: &Tensor) -> Result<Tensor> {
    apply_lin(g, &gp.out_head, h)
}

/// Register the raw position table rows as a graph constant.
pub fn pe_constant<T: Real>(g: &mut Graph<T>, table: &RelPosTable<T>) -> Result<Tensor> {
    g.input(
        table.flat().to_vec(),
        &[table.max_offset() + 1, table.dim()],
    )
}

#[cfg(test)]
mod tests;
