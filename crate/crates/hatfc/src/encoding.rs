//! Precomputed sinusoidal relative position encodings.
//!
//! The encoding of a pair (t, t') depends only on the offset t - t', so
//! the table is indexed by offset: row δ holds the encoding for
//! t - t' = δ. That keeps storage at O(max_offset · d) instead of a
//! pairwise table, with identical values. Offsets are 0-based; causal
//! use means δ ≥ 0 always.
//!
//! The table is immutable after construction and safe to share across
//! threads.

use crate::error::{Error, Result};
use crate::tensor::{real, Real};

/// Offset-indexed table of sinusoidal relative position encodings.
///
/// Row δ, even slot 2i holds `sin(δ / 10000^(2i/d))`; odd slot 2i+1
/// holds `cos(δ / 10000^(2i/d))`.
#[derive(Debug, Clone)]
pub struct RelPosTable<T> {
    max_offset: usize,
    dim: usize,
    rows: Vec<T>,
}

impl<T: Real> RelPosTable<T> {
    /// Build the table for offsets 0..=max_offset at dimension `d`.
    /// Construction is O(max_offset · d); every later lookup is O(1).
    pub fn build(max_offset: usize, d: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "position encoding dimension must be even and >= 2, got {d}"
            )));
        }
        let mut rows = Vec::with_capacity((max_offset + 1) * d);
        for delta in 0..=max_offset {
            rows.extend_from_slice(&direct_eval::<T>(delta, d)?);
        }
        Ok(RelPosTable {
            max_offset,
            dim: d,
            rows,
        })
    }

    pub fn max_offset(&self) -> usize {
        self.max_offset
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Encoding row for offset δ.
    pub fn row(&self, delta: usize) -> Result<&[T]> {
        if delta > self.max_offset {
            return Err(Error::Range(format!(
                "offset {delta} beyond table maximum {}",
                self.max_offset
            )));
        }
        Ok(&self.rows[delta * self.dim..(delta + 1) * self.dim])
    }

    /// Encoding for the pair (t, t'); requires t' ≤ t and the offset to
    /// be inside the table.
    pub fn lookup(&self, t: usize, t_prime: usize) -> Result<&[T]> {
        if t_prime > t {
            return Err(Error::Causality(format!(
                "position lookup asked for t'={t_prime} after t={t}"
            )));
        }
        self.row(t - t_prime)
    }

    /// The whole table as one flat (max_offset+1) × d row-major buffer.
    pub fn flat(&self) -> &[T] {
        &self.rows
    }
}

/// Evaluate the encoding for a single offset without the table. Serves
/// as the lookup oracle in tests.
pub fn direct_eval<T: Real>(delta: usize, d: usize) -> Result<Vec<T>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "position encoding dimension must be even and >= 2, got {d}"
        )));
    }
    let mut row = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let rate = 10000f64.powf(2.0 * i as f64 / d as f64);
        let angle = delta as f64 / rate;
        row.push(real::<T>(angle.sin()));
        row.push(real::<T>(angle.cos()));
    }
    Ok(row)
}
