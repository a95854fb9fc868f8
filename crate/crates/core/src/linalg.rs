//! Small dense/banded kernels used throughout: tridiagonal systems via the
//! Thomas algorithm and a minimal CSR matrix for Jacobian export.

use crate::error::{Error, Result};

/// Tridiagonal matrix of order `n`. `sub` and `sup` have length `n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1);
        Tridiagonal {
            sub: vec![0.0; n - 1],
            diag: vec![0.0; n],
            sup: vec![0.0; n - 1],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.diag[row]
        } else if col + 1 == row {
            self.sub[col]
        } else if row + 1 == col {
            self.sup[row]
        } else {
            0.0
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        for j in 0..n {
            let mut v = self.diag[j] * x[j];
            if j > 0 {
                v += self.sub[j - 1] * x[j - 1];
            }
            if j + 1 < n {
                v += self.sup[j] * x[j + 1];
            }
            out[j] = v;
        }
    }

    /// Max row-sum norm.
    pub fn norm_inf(&self) -> f64 {
        let n = self.len();
        let mut best: f64 = 0.0;
        for j in 0..n {
            let mut s = self.diag[j].abs();
            if j > 0 {
                s += self.sub[j - 1].abs();
            }
            if j + 1 < n {
                s += self.sup[j].abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn max_offdiag(&self) -> f64 {
        self.sub
            .iter()
            .chain(self.sup.iter())
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `self + shift * I` scaled entries left untouched otherwise.
    pub fn shifted(&self, shift: f64) -> Tridiagonal {
        let mut t = self.clone();
        for d in t.diag.iter_mut() {
            *d += shift;
        }
        t
    }

    /// Thomas factorization. Returns an error on a vanishing pivot.
    pub fn factor(&self) -> Result<TriFactor> {
        let n = self.len();
        let mut diag = self.diag.clone();
        let mut low = vec![0.0; n.saturating_sub(1)];
        for j in 1..n {
            let piv = diag[j - 1];
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::LinearSolve(format!(
                    "zero pivot in tridiagonal factorization at row {}",
                    j - 1
                )));
            }
            let l = self.sub[j - 1] / piv;
            low[j - 1] = l;
            diag[j] -= l * self.sup[j - 1];
        }
        if let Some(last) = diag.last() {
            if *last == 0.0 || !last.is_finite() {
                return Err(Error::LinearSolve(
                    "zero pivot in tridiagonal factorization at last row".into(),
                ));
            }
        }
        Ok(TriFactor {
            low,
            diag,
            sup: self.sup.clone(),
        })
    }
}

/// Factored tridiagonal system; `solve_in_place` performs forward elimination
/// followed by back substitution. For M-matrices every operation preserves
/// sign, so nonnegative right-hand sides yield nonnegative solutions exactly.
#[derive(Debug, Clone)]
pub struct TriFactor {
    low: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl TriFactor {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.diag.len();
        debug_assert_eq!(x.len(), n);
        for j in 1..n {
            x[j] -= self.low[j - 1] * x[j - 1];
        }
        x[n - 1] /= self.diag[n - 1];
        for j in (0..n - 1).rev() {
            x[j] = (x[j] - self.sup[j] * x[j + 1]) / self.diag[j];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Compressed sparse row matrix with explicit structural zeros kept.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for row in 0..self.nrows {
            let mut acc = 0.0;
            for idx in self.indptr[row]..self.indptr[row + 1] {
                acc += self.values[idx] * x[self.indices[idx]];
            }
            out[row] = acc;
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for row in 0..self.nrows {
            for idx in self.indptr[row]..self.indptr[row + 1] {
                m[(row, self.indices[idx])] = self.values[idx];
            }
        }
        m
    }
}

/// Incremental CSR builder; rows must be pushed in order with sorted columns.
pub struct CsrBuilder {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(ncols: usize) -> Self {
        CsrBuilder {
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_entry(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.ncols);
        debug_assert!(
            self.indices.len() == *self.indptr.last().unwrap()
                || *self.indices.last().unwrap() < col,
            "columns must be strictly increasing within a row"
        );
        self.indices.push(col);
        self.values.push(value);
    }

    pub fn finish_row(&mut self) {
        self.indptr.push(self.indices.len());
    }

    pub fn build(self) -> Csr {
        Csr {
            nrows: self.indptr.len() - 1,
            ncols: self.ncols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
