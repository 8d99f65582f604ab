//! Dense numeric kernel: a row-major `f64` matrix, the elementwise and
//! linear-algebra operations the model needs, a reverse-mode gradient tape,
//! and a finite-difference gradient checker.
//!
//! Everything here is deterministic: no threads, no global state, and the
//! same inputs always produce bit-identical outputs. The inner loop of
//! [`Matrix::matmul`] delegates to the `matrixmultiply` crate; all other
//! operations are written out directly.
//!
//! Conventions that downstream code relies on:
//!
//! * `relu` has derivative 0 at 0 (the backward pass treats the kink as flat);
//! * `maxpool_cols` breaks ties toward the lowest row index when routing
//!   gradients;
//! * `softmax_rows` subtracts the row maximum before exponentiating, so large
//!   negative mask values underflow cleanly to probability zero.

mod gradcheck;
pub(crate) mod io;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{grad, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a flat row-major buffer.
    ///
    /// # Errors
    /// Fails if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::numeric(format!(
                "matrix buffer has {} elements, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows.
    ///
    /// # Errors
    /// Fails if the rows have unequal lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::numeric(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    row.len(),
                    n_cols
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    /// A 1x1 matrix holding one scalar.
    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A 1xN row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrow of row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a 1x1 matrix.
    ///
    /// # Errors
    /// Fails if the matrix is not 1x1.
    pub fn item(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::numeric(format!(
                "expected a 1x1 scalar, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    fn same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::numeric(format!(
                "{op}: shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Matrix product `self * other`.
    ///
    /// # Errors
    /// Fails unless `self.cols == other.rows`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::numeric(format!(
                "matmul: inner dimensions differ, {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                other.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// Matrix product `self * other^T` without materializing the transpose.
    ///
    /// # Errors
    /// Fails unless `self.cols == other.cols`.
    pub fn matmul_bt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::numeric(format!(
                "matmul_bt: column counts differ, {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        if self.rows == 0 || other.rows == 0 || self.cols == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                other.rows,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                1,
                other.cols as isize,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// Matrix product `self^T * other` without materializing the transpose.
    ///
    /// # Errors
    /// Fails unless `self.rows == other.rows`.
    pub fn matmul_at(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::numeric(format!(
                "matmul_at: row counts differ, ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        if self.cols == 0 || other.cols == 0 || self.rows == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.cols,
                self.rows,
                other.cols,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// Elementwise sum.
    ///
    /// # Errors
    /// Fails on shape mismatch.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(out)
    }

    /// Elementwise difference.
    ///
    /// # Errors
    /// Fails on shape mismatch.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    /// Elementwise product.
    ///
    /// # Errors
    /// Fails on shape mismatch.
    pub fn mul_elem(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "mul_elem")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o *= v;
        }
        Ok(out)
    }

    /// Scalar multiple `s * self`.
    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o *= s;
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    ///
    /// # Errors
    /// Fails unless row counts match.
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::numeric(format!(
                "concat_cols: row counts differ, {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation of several matrices with equal column counts.
    ///
    /// # Errors
    /// Fails if column counts differ. An empty list is an error because the
    /// column count would be undefined.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::numeric("concat_rows: empty part list"))?;
        let cols = first.cols;
        let rows: usize = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            if m.cols != cols {
                return Err(Error::numeric(format!(
                    "concat_rows: column counts differ, {} vs {}",
                    cols, m.cols
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copy of rows `start..start + len`.
    ///
    /// # Errors
    /// Fails if the range runs past the last row.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(Error::numeric(format!(
                "slice_rows: rows {}..{} out of bounds for {} rows",
                start,
                start + len,
                self.rows
            )));
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Copy of the given rows, in the given order (rows may repeat).
    ///
    /// # Errors
    /// Fails if any index is out of bounds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::numeric(format!(
                    "gather_rows: row {} out of bounds for {} rows",
                    i, self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Elementwise rectified linear unit, `max(0, x)`.
    pub fn relu(&self) -> Matrix {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        out
    }

    /// Elementwise logistic sigmoid `1 / (1 + e^{-x})`.
    pub fn sigmoid(&self) -> Matrix {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o = sigmoid_scalar(*o);
        }
        out
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum before
    /// exponentiating. Rows of an empty matrix are left untouched.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            if row.is_empty() {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Column-wise maximum over rows, returned as a 1xC row vector.
    ///
    /// # Errors
    /// Fails on a matrix with no rows (the maximum would be undefined).
    pub fn maxpool_cols(&self) -> Result<Matrix> {
        let (m, idx) = self.maxpool_cols_with_argmax()?;
        let _ = idx;
        Ok(m)
    }

    /// Column-wise maximum plus the row index attaining it per column; ties
    /// resolve to the lowest row index.
    pub(crate) fn maxpool_cols_with_argmax(&self) -> Result<(Matrix, Vec<usize>)> {
        if self.rows == 0 {
            return Err(Error::numeric("maxpool_cols: matrix has no rows"));
        }
        let mut out = Matrix::zeros(1, self.cols);
        let mut arg = vec![0usize; self.cols];
        for (c, slot) in arg.iter_mut().enumerate() {
            let mut best = self.get(0, c);
            let mut best_r = 0;
            for r in 1..self.rows {
                let v = self.get(r, c);
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            out.data[c] = best;
            *slot = best_r;
        }
        Ok((out, arg))
    }

    /// Squared Frobenius norm (sum of squared entries).
    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// True if every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place elementwise sum, used by gradient accumulation.
    pub(crate) fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (o, v) in self.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(())
    }
}

/// Scalar logistic sigmoid, shared with the tape backward pass.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
