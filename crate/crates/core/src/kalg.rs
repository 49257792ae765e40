//! Kronecker and half-vectorization algebra.
//!
//! Conventions used throughout the crate:
//! * `vec` stacks columns, so entry `(i, j)` of an `n x n` matrix lands at
//!   index `j * n + i`;
//! * `vech` stacks the on-and-below-diagonal part column by column,
//!   `(0,0), (1,0), .., (n-1,0), (1,1), ..`.
//!
//! The structured selectors (`D_n`, `D_n^+`, `K_{n,n}`, `M_d`) are stored as
//! sparse triplets and multiplied against dense matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Result};

pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)` (with `i >= j`) inside `vech`.
pub fn vech_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    // columns 0..j contribute n, n-1, .., n-j+1 entries
    j * (2 * n - j + 1) / 2 + (i - j)
}

pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * n {
        return Err(dim_mismatch(n * n, v.len()));
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(dim_mismatch("square matrix", format!("{}x{}", n, m.ncols())));
    }
    let mut out = Vec::with_capacity(vech_len(n));
    for j in 0..n {
        for i in j..n {
            out.push(m[(i, j)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Symmetric completion of a half-vectorized matrix.
pub fn unvech(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != vech_len(n) {
        return Err(dim_mismatch(vech_len(n), v.len()));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Kronecker product `A (x) B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorKind {
    Duplication,
    DuplicationPinv,
    Commutation,
    DiagSelect,
}

/// A sparse 0 / 1 / 1/2 matrix with dense multiply semantics.
#[derive(Clone, Debug)]
pub struct StructuredSelector {
    kind: SelectorKind,
    n: usize,
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl StructuredSelector {
    pub fn kind(&self) -> SelectorKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, x) in &self.entries {
            m[(r, c)] += x;
        }
        m
    }

    pub fn transpose(&self) -> StructuredSelector {
        StructuredSelector {
            kind: self.kind,
            n: self.n,
            rows: self.cols,
            cols: self.rows,
            entries: self.entries.iter().map(|&(r, c, x)| (c, r, x)).collect(),
        }
    }

    /// `S * v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.cols, "selector/vector shape mismatch");
        let mut out = DVector::zeros(self.rows);
        for &(r, c, x) in &self.entries {
            out[r] += x * v[c];
        }
        out
    }

    /// `S * M`.
    pub fn mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.cols, "selector/matrix shape mismatch");
        let mut out = DMatrix::zeros(self.rows, m.ncols());
        for &(r, c, x) in &self.entries {
            for k in 0..m.ncols() {
                out[(r, k)] += x * m[(c, k)];
            }
        }
        out
    }

    /// `M * S`.
    pub fn right_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.rows, "matrix/selector shape mismatch");
        let mut out = DMatrix::zeros(m.nrows(), self.cols);
        for &(r, c, x) in &self.entries {
            for k in 0..m.nrows() {
                out[(k, c)] += m[(k, r)] * x;
            }
        }
        out
    }
}

/// Duplication matrix `D_n` (`n^2 x n(n+1)/2`), `vec(M) = D_n vech(M)`.
pub fn duplication(n: usize) -> StructuredSelector {
    let mut entries = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            entries.push((j * n + i, vech_index(n, i, j), 1.0));
        }
    }
    StructuredSelector {
        kind: SelectorKind::Duplication,
        n,
        rows: n * n,
        cols: vech_len(n),
        entries,
    }
}

/// Moore-Penrose inverse `D_n^+ = (D_n^T D_n)^-1 D_n^T`.
pub fn duplication_pinv(n: usize) -> StructuredSelector {
    let mut entries = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let w = if i == j { 1.0 } else { 0.5 };
            entries.push((vech_index(n, i, j), j * n + i, w));
        }
    }
    StructuredSelector {
        kind: SelectorKind::DuplicationPinv,
        n,
        rows: vech_len(n),
        cols: n * n,
        entries,
    }
}

/// Commutation matrix `K_{n,n}`, `K vec(M) = vec(M^T)`.
pub fn commutation(n: usize) -> StructuredSelector {
    let mut entries = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            // vec(M^T)[j*n + i] = M^T[i, j] = M[j, i] = vec(M)[i*n + j]
            entries.push((j * n + i, i * n + j, 1.0));
        }
    }
    StructuredSelector {
        kind: SelectorKind::Commutation,
        n,
        rows: n * n,
        cols: n * n,
        entries,
    }
}

/// Diagonal selector `M_d = sum_i (e_i e_i^T) (x) (e_i e_i^T)`.
pub fn diag_select(n: usize) -> StructuredSelector {
    let entries = (0..n).map(|i| (i * n + i, i * n + i, 1.0)).collect();
    StructuredSelector {
        kind: SelectorKind::DiagSelect,
        n,
        rows: n * n,
        cols: n * n,
        entries,
    }
}
