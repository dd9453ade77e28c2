//! Dense tensors with recorded reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! [`Graph::backward`] replays the record in reverse and populates
//! gradients for every node the loss reaches. One record covers one
//! forward pass; it is dropped afterwards, which bounds memory across
//! the generation loop.
//!
//! Precision is a type parameter: `f32` for speed, `f64` for gradient
//! checks. Broadcasting is never implicit — the only broadcast is the
//! explicit [`Graph::add_row_vec`].
//!
//! A record is single-threaded; distinct records may live on distinct
//! threads.

mod backward;
mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::finite_diff_check;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point type usable as graph element: `f32` or `f64`.
pub trait Real:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const BITS: u32;
}

impl Real for f32 {
    const BITS: u32 = 32;
}
impl Real for f64 {
    const BITS: u32 = 64;
}

/// Shorthand for converting an `f64` constant into the graph element type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 -> Real conversion")
}

pub type NodeId = usize;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value inside a [`Graph`]. Cheap to clone; reshaping
/// produces a new handle over the same node.
#[derive(Debug, Clone)]
pub struct Tensor {
    graph: u64,
    id: NodeId,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dim(format!("expected 2-d tensor, got {other:?}"))),
        }
    }

    /// Same node viewed with a different shape (row-major layout).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let new_len: usize = shape.iter().product();
        if new_len != self.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            graph: self.graph,
            id: self.id,
            shape: shape.to_vec(),
        })
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// out = A · Bᵀ with B stored n×k row-major.
    MatMulNT { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    /// Explicit row-broadcast: out[r] = a[r] + v.
    AddRowVec { a: NodeId, v: NodeId, rows: usize, cols: usize },
    Sum { a: NodeId },
    SoftmaxRows { a: NodeId, rows: usize, cols: usize },
    LayerNormRows { a: NodeId, gain: NodeId, bias: NodeId, rows: usize, cols: usize },
    Silu { a: NodeId },
    Softplus { a: NodeId },
    ConcatRows { parts: Vec<NodeId>, cols: usize, sizes: Vec<usize> },
    SliceRows { a: NodeId, start: usize, cols: usize },
    SliceCols { a: NodeId, start: usize, len: usize, rows: usize, src_cols: usize },
    ConcatCols { parts: Vec<NodeId>, rows: usize, widths: Vec<usize> },
    GatherRows { a: NodeId, indices: Vec<usize>, cols: usize },
    /// out[j] = exp(-gamma * offsets[j]), a 1×n row; gamma is scalar.
    DecayRow { gamma: NodeId, offsets: Vec<usize> },
    /// Banded windowed attention logits, see `banded_qk`.
    BandedQk { q: NodeId, k: NodeId, pe: NodeId, gamma: NodeId, t: usize, dk: usize, w_eff: usize },
    BandedSoftmax { a: NodeId, t: usize, w_eff: usize },
    BandedAv { a: NodeId, v: NodeId, t: usize, w_eff: usize, dv: usize },
    /// Single-query windowed logits over an explicit window, the query
    /// sitting at the window's last position. Pair arithmetic matches
    /// `BandedQk` exactly.
    RowQk { q: NodeId, k: NodeId, pe: NodeId, gamma: NodeId, dk: usize, w: usize },
    /// Fused single-query windowed attention: logits over
    /// `n_shared` context rows plus the query's own key, softmax,
    /// weighted value sum. Bit-compatible with the banded pipeline.
    RowAttend {
        q: NodeId,
        k_shared: NodeId,
        v_shared: NodeId,
        k_self: NodeId,
        v_self: NodeId,
        pe: NodeId,
        gamma: NodeId,
        lo: usize,
        n_shared: usize,
        dk: usize,
        dv: usize,
    },
}

struct Node<T> {
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// One recorded forward pass.
pub struct Graph<T: Real> {
    uid: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
    /// Multiply-accumulate count of the windowed attention kernel ops
    /// (logits + softmax + weighted sum), for complexity instrumentation.
    attn_flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            uid: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            attn_flops: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// MACs spent in windowed-attention kernel ops so far.
    pub fn attention_flops(&self) -> u64 {
        self.attn_flops
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Tensor {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Tensor {
            graph: self.uid,
            id,
            shape,
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.graph != self.uid {
            return Err(Error::Contract(
                "tensor belongs to a different computation record".into(),
            ));
        }
        Ok(())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dim(format!(
                "input data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf))
    }

    /// Leaf registered from a parameter buffer (snapshot copy).
    pub fn param(&mut self, data: &[T], shape: &[usize]) -> Result<Tensor> {
        self.input(data.to_vec(), shape)
    }

    pub fn scalar(&mut self, v: T) -> Tensor {
        self.push(vec![v], vec![1], Op::Leaf)
    }

    // ── Values and gradients ─────────────────────────────────────────

    pub fn value(&self, t: &Tensor) -> &[T] {
        &self.nodes[t.id].value
    }

    pub fn scalar_value(&self, t: &Tensor) -> T {
        self.nodes[t.id].value[0]
    }

    /// Gradient if the backward pass reached this node.
    pub fn grad(&self, t: &Tensor) -> Option<&[T]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Gradient with zeros for nodes the loss never reached.
    pub fn grad_or_zero(&self, t: &Tensor) -> Vec<T> {
        match &self.nodes[t.id].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[t.id].value.len()],
        }
    }

    // ── Arithmetic ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dimensions differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(
            &self.nodes[a.id].value,
            &self.nodes[b.id].value,
            m,
            ka,
            n,
            &mut out,
        );
        Ok(self.push(out, vec![m, n], Op::MatMul { a: a.id, b: b.id, m, k: ka, n }))
    }

    /// a · bᵀ where `b` is given row-major as n×k.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (m, ka) = a.dims2()?;
        let (n, kb) = b.dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul_nt inner dimensions differ: {m}x{ka} vs ({n}x{kb})ᵀ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(
            &self.nodes[a.id].value,
            &self.nodes[b.id].value,
            m,
            ka,
            n,
            &mut out,
        );
        Ok(self.push(out, vec![m, n], Op::MatMulNT { a: a.id, b: b.id, m, k: ka, n }))
    }

    fn zip_elementwise(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op: fn(NodeId, NodeId) -> Op<T>,
        f: fn(T, T) -> T,
    ) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        if a.shape != b.shape {
            return Err(Error::Dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let out: Vec<T> = self.nodes[a.id]
            .value
            .iter()
            .zip(self.nodes[b.id].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(out, a.shape.clone(), op(a.id, b.id)))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, a: &Tensor, c: T) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<T> = self.nodes[a.id].value.iter().map(|&x| x * c).collect();
        Ok(self.push(out, a.shape.clone(), Op::Scale { a: a.id, c }))
    }

    /// Explicit broadcast of a vector over the rows of a matrix.
    pub fn add_row_vec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(v)?;
        let (rows, cols) = a.dims2()?;
        if v.shape != [cols] {
            return Err(Error::Dim(format!(
                "row vector shape {:?} does not match {rows}x{cols}",
                v.shape
            )));
        }
        let vv = &self.nodes[v.id].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let arow = &self.nodes[a.id].value[r * cols..(r + 1) * cols];
            for c in 0..cols {
                out.push(arow[c] + vv[c]);
            }
        }
        Ok(self.push(out, vec![rows, cols], Op::AddRowVec { a: a.id, v: v.id, rows, cols }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let s = self.nodes[a.id].value.iter().copied().sum();
        Ok(self.push(vec![s], vec![1], Op::Sum { a: a.id }))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let (rows, cols) = a.dims2()?;
        let av = &self.nodes[a.id].value;
        if av.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite entries".into()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            out.extend(exps.iter().map(|&e| e / z));
        }
        Ok(self.push(out, vec![rows, cols], Op::SoftmaxRows { a: a.id, rows, cols }))
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    /// Variance gets epsilon 1e-5; rows must have at least 2 entries.
    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(gain)?;
        self.check(bias)?;
        let (rows, cols) = a.dims2()?;
        if cols < 2 {
            return Err(Error::Dim(format!(
                "layer_norm needs feature dimension >= 2, got {cols}"
            )));
        }
        if gain.shape != [cols] || bias.shape != [cols] {
            return Err(Error::Dim("layer_norm gain/bias must match feature dim".into()));
        }
        let eps = real::<T>(1e-5);
        let n = real::<T>(cols as f64);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &self.nodes[a.id].value[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<T>()
                / n;
            let inv = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                out.push(xhat * self.nodes[gain.id].value[c] + self.nodes[bias.id].value[c]);
            }
        }
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::LayerNormRows { a: a.id, gain: gain.id, bias: bias.id, rows, cols },
        ))
    }

    /// Smooth gated activation x * sigmoid(x).
    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<T> = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| x * kernels::sigmoid(x))
            .collect();
        Ok(self.push(out, a.shape.clone(), Op::Silu { a: a.id }))
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<T> = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| kernels::softplus(x))
            .collect();
        Ok(self.push(out, a.shape.clone(), Op::Softplus { a: a.id }))
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let (_, cols) = parts[0].dims2()?;
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(parts.len());
        let mut sizes = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for p in parts {
            self.check(p)?;
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {c} vs {cols}"
                )));
            }
            data.extend_from_slice(&self.nodes[p.id].value);
            ids.push(p.id);
            sizes.push(r);
            rows += r;
        }
        Ok(self.push(data, vec![rows, cols], Op::ConcatRows { parts: ids, cols, sizes }))
    }

    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check(a)?;
        let (rows, cols) = a.dims2()?;
        if start + len > rows {
            return Err(Error::Range(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.nodes[a.id].value[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(data, vec![len, cols], Op::SliceRows { a: a.id, start, cols }))
    }

    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check(a)?;
        let (rows, cols) = a.dims2()?;
        if start + len > cols {
            return Err(Error::Range(format!(
                "slice_cols {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let row = &self.nodes[a.id].value[r * cols..(r + 1) * cols];
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(
            data,
            vec![rows, len],
            Op::SliceCols { a: a.id, start, len, rows, src_cols: cols },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let (rows, _) = parts[0].dims2()?;
        let mut ids = Vec::with_capacity(parts.len());
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            self.check(p)?;
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::Dim(format!("concat_cols row mismatch: {r} vs {rows}")));
            }
            ids.push(p.id);
            widths.push(c);
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (idx, &id) in ids.iter().enumerate() {
                let w = widths[idx];
                data.extend_from_slice(&self.nodes[id].value[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(data, vec![rows, total], Op::ConcatCols { parts: ids, rows, widths }))
    }

    pub fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        self.check(a)?;
        let (rows, cols) = a.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Range(format!("gather index {i} out of {rows} rows")));
            }
            data.extend_from_slice(&self.nodes[a.id].value[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            data,
            vec![indices.len(), cols],
            Op::GatherRows { a: a.id, indices: indices.to_vec(), cols },
        ))
    }

    /// Row of decay factors exp(-gamma * offset) for the given offsets.
    /// Differentiable in the scalar `gamma`.
    pub fn decay_row(&mut self, gamma: &Tensor, offsets: &[usize]) -> Result<Tensor> {
        self.check(gamma)?;
        if gamma.len() != 1 {
            return Err(Error::Dim("decay_row expects a scalar gamma".into()));
        }
        let g = self.nodes[gamma.id].value[0];
        let out: Vec<T> = offsets
            .iter()
            .map(|&d| (-g * real::<T>(d as f64)).exp())
            .collect();
        Ok(self.push(
            out,
            vec![1, offsets.len()],
            Op::DecayRow { gamma: gamma.id, offsets: offsets.to_vec() },
        ))
    }

    // ── Banded windowed attention primitives ─────────────────────────
    //
    // A band is a [t, w_eff] matrix. Row t holds the causal window
    // [lo(t), t] with lo(t) = max(0, t - (w_eff - 1)); entry j maps to
    // source position lo(t) + j, so offsets run width-1 .. 0 left to
    // right. Entries beyond the row's width are zero and stay zero
    // through the softmax.

    /// Decayed, position-augmented attention logits over the causal band:
    /// out[t][j] = q_t · (k_p + pe_{t-p}) * exp(-gamma (t-p)) / sqrt(dk),
    /// with p = lo(t) + j.
    pub fn banded_qk(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        pe: &Tensor,
        gamma: &Tensor,
        w_eff: usize,
    ) -> Result<Tensor> {
        self.check(q)?;
        self.check(k)?;
        self.check(pe)?;
        self.check(gamma)?;
        let (t_len, dk) = q.dims2()?;
        let (kt, kdk) = k.dims2()?;
        let (n_off, pdk) = pe.dims2()?;
        if kt != t_len || kdk != dk || pdk != dk {
            return Err(Error::Dim(format!(
                "banded_qk shapes: q {t_len}x{dk}, k {kt}x{kdk}, pe {n_off}x{pdk}"
            )));
        }
        if w_eff == 0 || n_off < w_eff.min(t_len) {
            return Err(Error::Dim(format!(
                "position table covers {n_off} offsets, window needs {}",
                w_eff.min(t_len)
            )));
        }
        if gamma.len() != 1 {
            return Err(Error::Dim("banded_qk expects scalar gamma".into()));
        }
        let g = self.nodes[gamma.id].value[0];
        let inv_sqrt = T::one() / real::<T>(dk as f64).sqrt();
        let mut out = vec![T::zero(); t_len * w_eff];
        let qv = &self.nodes[q.id].value;
        let kv = &self.nodes[k.id].value;
        let pv = &self.nodes[pe.id].value;
        let mut pairs = 0u64;
        for t in 0..t_len {
            let lo = t.saturating_sub(w_eff - 1);
            let width = t - lo + 1;
            let qrow = &qv[t * dk..(t + 1) * dk];
            for j in 0..width {
                let p = lo + j;
                let delta = t - p;
                let krow = &kv[p * dk..(p + 1) * dk];
                let prow = &pv[delta * dk..(delta + 1) * dk];
                let mut acc = T::zero();
                for c in 0..dk {
                    acc = acc + qrow[c] * (krow[c] + prow[c]);
                }
                let tau = (-g * real::<T>(delta as f64)).exp();
                out[t * w_eff + j] = acc * tau * inv_sqrt;
            }
            pairs += width as u64;
        }
        self.attn_flops += pairs * dk as u64;
        Ok(self.push(
            out,
            vec![t_len, w_eff],
            Op::BandedQk { q: q.id, k: k.id, pe: pe.id, gamma: gamma.id, t: t_len, dk, w_eff },
        ))
    }

    /// Softmax over the valid prefix of each band row.
    pub fn banded_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let (t_len, w_eff) = a.dims2()?;
        let av = &self.nodes[a.id].value;
        let mut out = vec![T::zero(); t_len * w_eff];
        let mut pairs = 0u64;
        for t in 0..t_len {
            let width = (t + 1).min(w_eff);
            let row = &av[t * w_eff..t * w_eff + width];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..width {
                let e = (row[j] - m).exp();
                out[t * w_eff + j] = e;
                z = z + e;
            }
            for j in 0..width {
                out[t * w_eff + j] = out[t * w_eff + j] / z;
            }
            pairs += width as u64;
        }
        self.attn_flops += pairs * 4;
        Ok(self.push(out, vec![t_len, w_eff], Op::BandedSoftmax { a: a.id, t: t_len, w_eff }))
    }

    /// Weighted sum of value rows under band weights:
    /// out[t] = sum_j band[t][j] * v[lo(t) + j].
    pub fn banded_av(&mut self, band: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check(band)?;
        self.check(v)?;
        let (t_len, w_eff) = band.dims2()?;
        let (vt, dv) = v.dims2()?;
        if vt != t_len {
            return Err(Error::Dim(format!(
                "banded_av rows: band {t_len}, values {vt}"
            )));
        }
        let bv = &self.nodes[band.id].value;
        let vv = &self.nodes[v.id].value;
        let mut out = vec![T::zero(); t_len * dv];
        let mut pairs = 0u64;
        for t in 0..t_len {
            let lo = t.saturating_sub(w_eff - 1);
            let width = t - lo + 1;
            let orow = &mut out[t * dv..(t + 1) * dv];
            for j in 0..width {
                let p = lo + j;
                kernels::axpy(bv[t * w_eff + j], &vv[p * dv..(p + 1) * dv], orow);
            }
            pairs += width as u64;
        }
        self.attn_flops += pairs * dv as u64;
        Ok(self.push(out, vec![t_len, dv], Op::BandedAv { a: band.id, v: v.id, t: t_len, w_eff, dv }))
    }

    /// Logits of one query against a contiguous window of keys, the
    /// query occupying the window's last slot: entry j pairs with
    /// k[j] at offset w-1-j. Bit-compatible with the corresponding row
    /// of [`Graph::banded_qk`].
    pub fn row_qk(
        &mut self,
        q: &Tensor,
        k_win: &Tensor,
        pe: &Tensor,
        gamma: &Tensor,
    ) -> Result<Tensor> {
        self.check(q)?;
        self.check(k_win)?;
        self.check(pe)?;
        self.check(gamma)?;
        let (qr, dk) = q.dims2()?;
        let (w, kdk) = k_win.dims2()?;
        let (n_off, pdk) = pe.dims2()?;
        if qr != 1 || kdk != dk || pdk != dk {
            return Err(Error::Dim(format!(
                "row_qk shapes: q {qr}x{dk}, k {w}x{kdk}, pe {n_off}x{pdk}"
            )));
        }
        if w == 0 || n_off < w {
            return Err(Error::Dim(format!(
                "position table covers {n_off} offsets, window needs {w}"
            )));
        }
        if gamma.len() != 1 {
            return Err(Error::Dim("row_qk expects scalar gamma".into()));
        }
        let g = self.nodes[gamma.id].value[0];
        let inv_sqrt = T::one() / real::<T>(dk as f64).sqrt();
        let qv = &self.nodes[q.id].value;
        let kv = &self.nodes[k_win.id].value;
        let pv = &self.nodes[pe.id].value;
        let mut out = vec![T::zero(); w];
        for j in 0..w {
            let delta = w - 1 - j;
            let krow = &kv[j * dk..(j + 1) * dk];
            let prow = &pv[delta * dk..(delta + 1) * dk];
            let mut acc = T::zero();
            for c in 0..dk {
                acc = acc + qv[c] * (krow[c] + prow[c]);
            }
            let tau = (-g * real::<T>(delta as f64)).exp();
            out[j] = acc * tau * inv_sqrt;
        }
        self.attn_flops += (w * dk) as u64;
        Ok(self.push(
            out,
            vec![1, w],
            Op::RowQk { q: q.id, k: k_win.id, pe: pe.id, gamma: gamma.id, dk, w },
        ))
    }

    /// Fused windowed attention of one query over `n_shared` rows of a
    /// shared context (starting at row `lo`) plus the query's own
    /// key/value. The query occupies the window's last slot. Produces
    /// the same bits as slicing the window out and running the banded
    /// pipeline.
    #[allow(clippy::too_many_arguments)]
    pub fn row_attend(
        &mut self,
        q: &Tensor,
        k_shared: &Tensor,
        v_shared: &Tensor,
        k_self: &Tensor,
        v_self: &Tensor,
        pe: &Tensor,
        gamma: &Tensor,
        lo: usize,
        n_shared: usize,
    ) -> Result<Tensor> {
        for t in [q, k_shared, v_shared, k_self, v_self, pe, gamma] {
            self.check(t)?;
        }
        let (qr, dk) = q.dims2()?;
        let (kt, kdk) = k_shared.dims2()?;
        let (vt, dv) = v_shared.dims2()?;
        let (n_off, pdk) = pe.dims2()?;
        let w = n_shared + 1;
        if qr != 1 || kdk != dk || pdk != dk || k_self.shape() != [1, dk] {
            return Err(Error::Dim("row_attend key shapes disagree".into()));
        }
        if v_self.shape() != [1, dv] || vt != kt {
            return Err(Error::Dim("row_attend value shapes disagree".into()));
        }
        if lo + n_shared > kt {
            return Err(Error::Range(format!(
                "window rows {lo}..{} beyond shared context of {kt}",
                lo + n_shared
            )));
        }
        if n_off < w {
            return Err(Error::Dim(format!(
                "position table covers {n_off} offsets, window needs {w}"
            )));
        }
        if gamma.len() != 1 {
            return Err(Error::Dim("row_attend expects scalar gamma".into()));
        }

        let gam = self.nodes[gamma.id].value[0];
        let inv_sqrt = T::one() / real::<T>(dk as f64).sqrt();
        let qv = &self.nodes[q.id].value;
        let ks = &self.nodes[k_shared.id].value;
        let vs = &self.nodes[v_shared.id].value;
        let kself = &self.nodes[k_self.id].value;
        let vself = &self.nodes[v_self.id].value;
        let pv = &self.nodes[pe.id].value;

        // logits, same pair arithmetic as the banded kernel
        let mut exps = vec![T::zero(); w];
        let mut maxv = T::neg_infinity();
        let mut logits = vec![T::zero(); w];
        for j in 0..w {
            let delta = w - 1 - j;
            let krow = if j < n_shared {
                &ks[(lo + j) * dk..(lo + j + 1) * dk]
            } else {
                &kself[..]
            };
            let prow = &pv[delta * dk..(delta + 1) * dk];
            let mut acc = T::zero();
            for c in 0..dk {
                acc = acc + qv[c] * (krow[c] + prow[c]);
            }
            let tau = (-gam * real::<T>(delta as f64)).exp();
            let l = acc * tau * inv_sqrt;
            logits[j] = l;
            if l > maxv {
                maxv = l;
            }
        }
        let mut z = T::zero();
        for j in 0..w {
            let e = (logits[j] - maxv).exp();
            exps[j] = e;
            z = z + e;
        }
        let mut out = vec![T::zero(); dv];
        for j in 0..w {
            let a = exps[j] / z;
            let vrow = if j < n_shared {
                &vs[(lo + j) * dv..(lo + j + 1) * dv]
            } else {
                &vself[..]
            };
            kernels::axpy(a, vrow, &mut out);
        }
        self.attn_flops += (w * (dk + dv)) as u64 + 4 * w as u64;
        Ok(self.push(
            out,
            vec![1, dv],
            Op::RowAttend {
                q: q.id,
                k_shared: k_shared.id,
                v_shared: v_shared.id,
                k_self: k_self.id,
                v_self: v_self.id,
                pe: pe.id,
                gamma: gamma.id,
                lo,
                n_shared,
                dk,
                dv,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients of every
    /// node the loss reaches. Calling it twice on one record is an
    /// error; build a new record instead.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        self.check(loss)?;
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this record; rebuild the forward pass".into(),
            ));
        }
        if !self.nodes[loss.id].value[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.backward_done = true;
        self.nodes[loss.id].grad = Some(vec![T::one()]);
        self.run_backward(loss.id);
        Ok(())
    }
}
