//! Minimal dense row-major matrix with f64-accumulating reductions.
//!
//! Weights live in f32; every dot product and sum accumulates in f64 so
//! batch partitioning cannot perturb results beyond storage rounding.

use crate::error::UcanError;
use crate::Result;

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from row-major data; errors if the element count disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(UcanError::Shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// `y = self * x` with f64 accumulation.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(UcanError::Shape(format!(
                "matvec: matrix is {}x{}, vector has {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0f64;
            for (w, v) in row.iter().zip(x) {
                acc += *w as f64 * *v as f64;
            }
            y.push(acc as f32);
        }
        Ok(y)
    }

    /// `y = selfᵀ * x` with f64 accumulation.
    pub fn t_matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.rows {
            return Err(UcanError::Shape(format!(
                "t_matvec: matrix is {}x{}, vector has {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut acc = vec![0.0f64; self.cols];
        for i in 0..self.rows {
            let xi = x[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for (a, w) in acc.iter_mut().zip(self.row(i)) {
                *a += *w as f64 * xi;
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    /// `self * other` with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(UcanError::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k) as f64;
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let cur = out.get(i, j) as f64;
                    out.set(i, j, (cur + a * other.get(k, j) as f64) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Multiplies column `j` by `s` in place.
    pub fn scale_column(&mut self, j: usize, s: f32) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] *= s;
        }
    }

    /// Mean absolute value of column `j`, f64-accumulated.
    pub fn col_l1_mean(&self, j: usize) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for i in 0..self.rows {
            acc += self.get(i, j).abs() as f64;
        }
        acc / self.rows as f64
    }

    /// Bitwise equality, distinguishing -0.0 and NaN payloads.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
