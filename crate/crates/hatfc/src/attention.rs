//! Dynamic windowed masked attention.
//!
//! Attention at step t is restricted to the causal window
//! `[max(seq_start, t - floor(W/2)), t]`, so the effective span is
//! `floor(W/2) + 1`. Logits follow the decayed, position-augmented form
//!
//! ```text
//! logit(t, t') = q_t · (k_t' + pe_{t-t'}) · exp(-γ (t - t')) / sqrt(d_k)
//! ```
//!
//! with γ = softplus(raw) kept positive by reparameterization. The decay
//! multiplies the scaled logit before the softmax, not the post-softmax
//! weight. [`full_attention_oracle`] is an independently written dense
//! O(T²) reference used by tests and benchmarks; it never shares code
//! with the windowed path.

use crate::encoding::RelPosTable;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tensor::{real, Graph, Real};

/// Causal attention window for step `t`: `[max(seq_start, t - W/2), t]`.
/// Total over all valid `t >= seq_start`; never contains an index > t.
pub fn causal_window(t: usize, w: usize, seq_start: usize) -> std::ops::RangeInclusive<usize> {
    debug_assert!(t >= seq_start);
    let lo = seq_start.max(t.saturating_sub(w / 2));
    lo..=t
}

/// Window hyperparameter wrapper. `w_eff = floor(W/2) + 1` is the
/// largest number of positions a window can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    w: usize,
}

impl WindowSpec {
    pub fn new(w: usize) -> Result<Self> {
        if w < 2 {
            return Err(Error::Config(format!("window W must be >= 2, got {w}")));
        }
        Ok(WindowSpec { w })
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Effective window span floor(W/2) + 1.
    pub fn w_eff(&self) -> usize {
        self.w / 2 + 1
    }

    pub fn window(&self, t: usize, seq_start: usize) -> std::ops::RangeInclusive<usize> {
        causal_window(t, self.w, seq_start)
    }
}

/// Learnable exponential decay τ(t, t') = exp(-γ |t - t'|), one per
/// attention head. γ = softplus(raw_gamma) stays positive for any raw
/// value, τ(t, t) = 1 exactly, and τ is strictly decreasing in the
/// offset whenever γ > 0.
#[derive(Debug, Clone, Copy)]
pub struct DecayKernel<T> {
    raw_gamma: T,
}

impl<T: Real> DecayKernel<T> {
    /// Kernel whose softplus(raw) equals the requested γ.
    pub fn with_gamma(gamma: f64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::Config(format!("decay gamma must be > 0, got {gamma}")));
        }
        // inverse softplus: raw = ln(e^γ - 1)
        let raw = (gamma.exp() - 1.0).ln();
        Ok(DecayKernel {
            raw_gamma: real::<T>(raw),
        })
    }

    pub fn from_raw(raw_gamma: T) -> Self {
        DecayKernel { raw_gamma }
    }

    pub fn raw(&self) -> T {
        self.raw_gamma
    }

    pub fn gamma(&self) -> T {
        crate::tensor::kernels::softplus(self.raw_gamma)
    }

    /// τ over a causal window: element j is exp(-γ (t - t'_j)), all in
    /// (0, 1], with the self-position last and exactly 1 when t'_j = t.
    pub fn decay_weights(&self, t: usize, window: std::ops::RangeInclusive<usize>) -> Vec<T> {
        let g = self.gamma();
        window
            .map(|p| {
                debug_assert!(p <= t);
                let delta = real::<T>((t - p) as f64);
                if t == p {
                    T::one()
                } else {
                    (-g * delta).exp()
                }
            })
            .collect()
    }
}

/// Head count and per-head dimensions of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub window: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 3,
            d_k: 128,
            d_v: 128,
            window: 32,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.d_k < 1 || self.d_v < 1 {
            return Err(Error::Config("attention dimensions must be >= 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "attention window must be >= 2, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Single-head windowed attention over explicit position-encoding rows
/// (row δ = offset δ, already in key space). Returns the [T × d_v]
/// output; positions outside each causal window get exactly zero
/// weight. Runs on a throwaway record, so it is also differentiable
/// end-to-end when embedded in a larger graph via the same ops.
pub fn attend_with_pe<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    pe_rows: &Mat<T>,
    kernel: &DecayKernel<T>,
    win: &WindowSpec,
) -> Result<Mat<T>> {
    let (out, _) = attend_counting(q, k, v, pe_rows, kernel, win)?;
    Ok(out)
}

/// [`attend_with_pe`] plus the multiply-accumulate count of the
/// attention kernel (logits + softmax + weighted sum).
pub fn attend_counting<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    pe_rows: &Mat<T>,
    kernel: &DecayKernel<T>,
    win: &WindowSpec,
) -> Result<(Mat<T>, u64)> {
    let t_len = q.rows();
    if t_len == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    if k.rows() != t_len || v.rows() != t_len {
        return Err(Error::Dim(format!(
            "attention rows disagree: q {t_len}, k {}, v {}",
            k.rows(),
            v.rows()
        )));
    }
    if k.cols() != q.cols() {
        return Err(Error::Dim(format!(
            "query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    let w_eff = win.w_eff();
    let needed = w_eff.min(t_len);
    if pe_rows.cols() != q.cols() || pe_rows.rows() < needed {
        return Err(Error::Dim(format!(
            "position rows {}x{} cannot serve window {needed} at d_k {}",
            pe_rows.rows(),
            pe_rows.cols(),
            q.cols()
        )));
    }

    let mut g = Graph::<T>::new();
    let qt = g.input(q.data().to_vec(), &[t_len, q.cols()])?;
    let kt = g.input(k.data().to_vec(), &[t_len, k.cols()])?;
    let vt = g.input(v.data().to_vec(), &[t_len, v.cols()])?;
    let pe = g.input(
        pe_rows.data()[..needed * pe_rows.cols()].to_vec(),
        &[needed, pe_rows.cols()],
    )?;
    let raw = g.scalar(kernel.raw());
    let gamma = g.softplus(&raw)?;
    let band = g.banded_qk(&qt, &kt, &pe, &gamma, w_eff)?;
    let weights = g.banded_softmax(&band)?;
    let out = g.banded_av(&weights, &vt)?;
    let flops = g.attention_flops();
    Ok((Mat::from_vec(t_len, v.cols(), g.value(&out).to_vec())?, flops))
}

/// Windowed attention taking position encodings from a lookup table.
/// The table must be built at the key dimension and cover the window.
pub fn attend<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    tbl: &RelPosTable<T>,
    kernel: &DecayKernel<T>,
    win: &WindowSpec,
) -> Result<Mat<T>> {
    if tbl.dim() != q.cols() {
        return Err(Error::Dim(format!(
            "position table dim {} does not match d_k {}",
            tbl.dim(),
            q.cols()
        )));
    }
    let needed = win.w_eff().min(q.rows().max(1));
    if tbl.max_offset() + 1 < needed {
        return Err(Error::Range(format!(
            "position table covers offsets 0..={}, window needs {}",
            tbl.max_offset(),
            needed - 1
        )));
    }
    let pe = Mat::from_vec(
        tbl.max_offset() + 1,
        tbl.dim(),
        tbl.flat().to_vec(),
    )?;
    attend_with_pe(q, k, v, &pe, kernel, win)
}

/// Dense O(T²) causal attention, written independently of the windowed
/// path; the reference implementation for tests and benchmarks.
///
/// Optional decay and position encodings let it mirror the full logit
/// form; with both `None` it is plain masked scaled dot-product
/// attention.
pub fn full_attention_oracle<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    causal: bool,
    gamma: Option<T>,
    pe: Option<&Mat<T>>,
) -> Result<Mat<T>> {
    let (out, _) = full_attention_counting(q, k, v, causal, gamma, pe)?;
    Ok(out)
}

/// [`full_attention_oracle`] plus its multiply-accumulate count. The
/// dense kernel computes every pair before masking, so the count covers
/// all T² pairs.
pub fn full_attention_counting<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    causal: bool,
    gamma: Option<T>,
    pe: Option<&Mat<T>>,
) -> Result<(Mat<T>, u64)> {
    let t_len = q.rows();
    if t_len == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    if k.rows() != t_len || v.rows() != t_len || k.cols() != q.cols() {
        return Err(Error::Dim("oracle attention shape mismatch".into()));
    }
    let dk = q.cols();
    let dv = v.cols();
    let scale = T::one() / real::<T>(dk as f64).sqrt();

    let mut logits = vec![T::zero(); t_len * t_len];
    for t in 0..t_len {
        for p in 0..t_len {
            let mut s = T::zero();
            for c in 0..dk {
                let key = match pe {
                    Some(table) if p <= t => k.get(p, c) + table.get(t - p, c),
                    _ => k.get(p, c),
                };
                s = s + q.get(t, c) * key;
            }
            if let Some(gam) = gamma {
                let delta = real::<T>(t.abs_diff(p) as f64);
                s = s * (-gam * delta).exp();
            }
            logits[t * t_len + p] = s * scale;
        }
    }
    let mut flops = (t_len * t_len * dk) as u64;

    if causal {
        for t in 0..t_len {
            for p in t + 1..t_len {
                logits[t * t_len + p] = T::neg_infinity();
            }
        }
    }

    let mut out = Mat::zeros(t_len, dv);
    for t in 0..t_len {
        let row = &logits[t * t_len..(t + 1) * t_len];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&l| (l - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        for p in 0..t_len {
            let w = exps[p] / z;
            for c in 0..dv {
                let cur = out.get(t, c);
                out.set(t, c, cur + w * v.get(p, c));
            }
        }
    }
    flops += (t_len * t_len) as u64 * 4 + (t_len * t_len * dv) as u64;
    Ok((out, flops))
}
