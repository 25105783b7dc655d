use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major values, rejecting a length mismatch
    /// or any non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite matrix entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Unchecked constructor for internal arithmetic results.
    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self { rows, cols, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self (n×k) · rhs (k×m)` where `rhs` is given as a row-major slice.
    pub(crate) fn matmul_slice(&self, rhs: &[f64], rhs_cols: usize) -> Matrix {
        debug_assert_eq!(rhs.len(), self.cols * rhs_cols);
        let mut out = vec![0.0; self.rows * rhs_cols];
        for (i, a_row) in self.iter_rows().enumerate() {
            let o = &mut out[i * rhs_cols..(i + 1) * rhs_cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs[k * rhs_cols..(k + 1) * rhs_cols];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(self.rows, rhs_cols, out)
    }

    /// `self (n×m) · rhsᵀ` where `rhs` is a row-major `k×m` slice.
    pub(crate) fn matmul_transposed_slice(&self, rhs: &[f64], rhs_rows: usize) -> Matrix {
        debug_assert_eq!(rhs.len(), rhs_rows * self.cols);
        let mut out = vec![0.0; self.rows * rhs_rows];
        for (i, a_row) in self.iter_rows().enumerate() {
            for k in 0..rhs_rows {
                let b_row = &rhs[k * self.cols..(k + 1) * self.cols];
                out[i * rhs_rows + k] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Matrix::from_raw(self.rows, rhs_rows, out)
    }

    /// Accumulates `selfᵀ · rhs` into `out` (shape `self.cols × rhs.cols`).
    pub(crate) fn accumulate_transposed_matmul(&self, rhs: &Matrix, out: &mut [f64]) {
        debug_assert_eq!(self.rows, rhs.rows);
        debug_assert_eq!(out.len(), self.cols * rhs.cols);
        for (a_row, b_row) in self.iter_rows().zip(rhs.iter_rows()) {
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
    }

    /// Row gathering, used to assemble minibatches.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, out)
    }
}
