//! Dense row-major matrices and the small set of linear-algebra kernels the
//! solvers need: products, Gram matrices, Khatri-Rao products.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. uniform on [0, 1).
    pub fn random_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::arg(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for (k, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs = other.row(k);
                for (d, &x) in dst.iter_mut().zip(rhs.iter()) {
                    *d += l * x;
                }
            }
        }
        Ok(out)
    }

    /// selfᵀ · self, a cols×cols Gram matrix.
    pub fn gram(&self) -> Matrix {
        let f = self.cols;
        let mut out = Matrix::zeros(f, f);
        for r in 0..self.rows {
            let row = self.row(r);
            for a in 0..f {
                let va = row[a];
                if va == 0.0 {
                    continue;
                }
                for b in 0..f {
                    out.data[a * f + b] += va * row[b];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn hadamard_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a *= b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.data.len(), other.data.len());
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Scales row r by factors[r].
    pub fn scale_rows(&self, factors: &[f64]) -> Matrix {
        debug_assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (r, &w) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= w;
            }
        }
        out
    }

    pub fn clamp_nonneg(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn is_nonneg(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frob_dist(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn col_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                out[c] += v * v;
            }
        }
        out.iter().map(|v| v.sqrt()).collect()
    }
}

/// Columnwise Kronecker product, read left to right: the first input varies
/// slowest over the output rows, the last varies fastest.
pub fn khatri_rao(mats: &[&Matrix]) -> Result<Matrix> {
    if mats.len() < 2 {
        return Err(Error::arg("khatri_rao needs at least two matrices"));
    }
    let f = mats[0].cols;
    if mats.iter().any(|m| m.cols != f) {
        return Err(Error::arg("khatri_rao column counts must match"));
    }
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        let mut out = Matrix::zeros(acc.rows * m.rows, f);
        for ra in 0..acc.rows {
            let a = acc.row(ra);
            for rb in 0..m.rows {
                let b = m.row(rb);
                let dst = out.row_mut(ra * m.rows + rb);
                for c in 0..f {
                    dst[c] = a[c] * b[c];
                }
            }
        }
        acc = out;
    }
    Ok(acc)
}
