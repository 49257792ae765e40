//! Cyclic Jacobi eigensolver for real symmetric matrices.
//!
//! Every spectral function in the crate goes through [`jacobi_eigen`], so
//! results are reproducible across platforms and BLAS builds. Convergence is
//! declared once the off-diagonal Frobenius mass drops below `tol * ||M||_F`;
//! the default tolerance is `1e-13` and can be overridden with the
//! `KRONFIT_EIG_TOL` environment variable.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_EIG_TOL: f64 = 1e-13;
pub const EIG_TOL_ENV: &str = "KRONFIT_EIG_TOL";
const MAX_SWEEPS: usize = 100;

/// Eigensolver tolerance, read once from `KRONFIT_EIG_TOL`.
pub fn eig_tolerance() -> f64 {
    static TOL: OnceLock<f64> = OnceLock::new();
    *TOL.get_or_init(|| {
        std::env::var(EIG_TOL_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|t| t.is_finite() && *t > 0.0)
            .unwrap_or(DEFAULT_EIG_TOL)
    })
}

/// Orthogonal eigendecomposition `M = V diag(values) V^T`.
///
/// Eigenvalues are sorted ascending; column `k` of `vectors` belongs to
/// `values[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(lambda)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[k]);
        }
        let mut out = scaled * self.vectors.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn off_diagonal_mass(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Eigendecomposition with the process-wide tolerance.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> Result<SymEigen> {
    jacobi_eigen_with_tol(m, eig_tolerance())
}

pub fn jacobi_eigen_with_tol(m: &DMatrix<f64>, tol: f64) -> Result<SymEigen> {
    if m.nrows() != m.ncols() {
        return Err(crate::error::dim_mismatch(
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let n = m.nrows();
    let mut a = m.clone();
    symmetrize_in_place(&mut a);
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();

    if scale > 0.0 && n > 1 {
        let target = tol * scale;
        let mut converged = false;
        let mut off = off_diagonal_mass(&a);
        for _ in 0..MAX_SWEEPS {
            if off <= target {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
            off = off_diagonal_mass(&a);
        }
        if !converged && off > target {
            return Err(Error::EigenNoConvergence {
                sweeps: MAX_SWEEPS,
                off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| a[(k, k)]));
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymEigen { values, vectors })
}
