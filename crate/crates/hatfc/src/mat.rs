//! Small row-major matrix used at module boundaries.
//!
//! The autodiff graph keeps its own flat buffers; `Mat` is the plain value
//! container for datasets, predictions, and reference oracles.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Vertical concatenation of row blocks sharing a column count.
    pub fn vstack(parts: &[&Mat<T>]) -> Result<Self> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Contract("vstack of zero matrices".into()))?
            .cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Dim(format!(
                    "vstack column mismatch: {} vs {}",
                    p.cols, cols
                )));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::Range(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                self.rows
            )));
        }
        Ok(Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Dim(format!(
                "pushed row has {} entries, matrix has {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Convert element type, e.g. dataset f64 values to model precision.
pub fn cast<A: Real, B: Real>(m: &Mat<A>) -> Mat<B> {
    m.map(|v| B::from(v).expect("float cast"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vstack_and_slice_round_trip() {
        let a = Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let b = Mat::from_fn(1, 3, |_, c| 100.0 + c as f64);
        let s = Mat::vstack(&[&a, &b]).unwrap();
        assert_eq!(s.rows(), 3);
        assert_eq!(s.row(2), &[100.0, 101.0, 102.0]);
        let back = s.slice_rows(0, 2).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn vstack_rejects_mixed_widths() {
        let a = Mat::<f64>::zeros(1, 2);
        let b = Mat::<f64>::zeros(1, 3);
        assert!(Mat::vstack(&[&a, &b]).is_err());
    }
}
