//! Small dense matrices sized by the problem dimension.
//!
//! Vectors are plain `[f64]` slices. [`Mat`] is a row-major square matrix and
//! [`SymMat`] stores only the upper triangle, so `(i, j)` and `(j, i)` read
//! the same slot.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Number of stored entries of a packed symmetric `n x n` matrix.
#[inline]
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Offset of `(i, j)` in packed upper-triangular row-major storage.
#[inline]
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    let (r, c) = if i <= j { (i, j) } else { (j, i) };
    r * n - r * (r + 1) / 2 + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    n: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from rows; panics if the rows do not form a square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        Self {
            n,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.data[j * n + i] = self.data[i * n + j];
            }
        }
        t
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mat_vec_into(v, &mut out);
        out
    }

    pub fn mat_vec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.n, "dimension mismatch");
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self.get(i, j) == 0.0))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Inverse of a diagonal matrix; off-diagonal entries are ignored.
    pub fn diag_inverse(&self) -> Result<Mat> {
        let mut inv = Mat::zeros(self.n);
        for i in 0..self.n {
            let v = self.get(i, i);
            if v == 0.0 {
                return Err(Error::DegenerateDiffusion { coord: i });
            }
            inv.set(i, i, 1.0 / v);
        }
        Ok(inv)
    }

    /// General inverse. Only used once when a diffusion model is built.
    pub fn inverse(&self) -> Result<Mat> {
        if self.is_diagonal() {
            return self.diag_inverse();
        }
        let m = DMatrix::from_row_slice(self.n, self.n, &self.data);
        let inv = m.try_inverse().ok_or(Error::SingularMatrix)?;
        let mut out = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(i, j, inv[(i, j)]);
            }
        }
        if out.data.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::SingularMatrix)
        }
    }

    /// `A : B = trace(A B^T)`.
    pub fn frobenius(&self, other: &Mat) -> f64 {
        assert_eq!(self.n, other.n, "dimension mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Symmetric matrix with shared storage for `(i, j)` and `(j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    n: usize,
    data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; packed_len(n)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn from_packed(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), packed_len(n), "packed length mismatch");
        Self { n, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[packed_index(self.n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = packed_index(self.n, i, j);
        self.data[k] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> SymRef<'_> {
        SymRef {
            n: self.n,
            data: &self.data,
        }
    }

    pub fn to_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    pub fn frobenius(&self, other: &SymMat) -> f64 {
        self.view().frobenius(other.view())
    }

    pub fn trace(&self) -> f64 {
        self.view().trace()
    }
}

/// Borrowed view of a packed symmetric matrix, used on the hot path so that
/// drivers can read rows of a batch without copying.
#[derive(Debug, Clone, Copy)]
pub struct SymRef<'a> {
    n: usize,
    data: &'a [f64],
}

impl<'a> SymRef<'a> {
    pub fn new(n: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(data.len(), packed_len(n));
        Self { n, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[packed_index(self.n, i, j)]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self, other: SymRef<'_>) -> f64 {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut s = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                let p = self.get(i, j) * other.get(i, j);
                s += if i == j { p } else { 2.0 * p };
            }
        }
        s
    }

    pub fn to_owned(&self) -> SymMat {
        SymMat {
            n: self.n,
            data: self.data.to_vec(),
        }
    }
}
