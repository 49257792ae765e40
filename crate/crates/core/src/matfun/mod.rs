//! Spectral functions of symmetric positive-definite matrices.
//!
//! The logarithm, exponential and real powers are evaluated on a cached
//! Jacobi eigendecomposition. The three derivative operators
//!
//! * `Psi(Theta) = int_0^1 Theta^t (x) Theta^(1-t) dt` (Frechet derivative of `exp` at `log Theta`),
//! * `H(Theta) = Psi(Theta)^-1` (Frechet derivative of `log` at `Theta`),
//! * `Xi(Theta) = int int Theta^(t+s-1) (x) Theta^(1-t-s) ds dt`,
//!
//! are all diagonal in the basis `V (x) V`, so each is a divided-difference
//! kernel `F[a, b] = f(lambda_a, lambda_b)` applied entrywise in the
//! eigenbasis. [`apply_derivative`] applies a kernel to an `n x n` matrix in
//! `O(n^3)`; the `*_operator` functions materialize the `n^2 x n^2` matrix.

mod eigen;

pub use eigen::{
    eig_tolerance, jacobi_eigen, jacobi_eigen_with_tol, SymEigen, DEFAULT_EIG_TOL, EIG_TOL_ENV,
};
pub(crate) use eigen::symmetrize_in_place;

use nalgebra::DMatrix;

use crate::error::{dim_mismatch, Error, Result};

/// Relative asymmetry tolerated (and silently removed) on construction.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues closer than this (relative to the larger one) use the
/// coincident-eigenvalue branch of the divided differences.
pub const EQUAL_EIG_RTOL: f64 = 1e-9;

fn checked_symmetric(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(dim_mismatch(
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("matrix has non-finite entries".into()));
    }
    let scale = m.amax();
    let asymmetry = (&m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric { asymmetry, scale });
    }
    symmetrize_in_place(&mut m);
    Ok(m)
}

/// A real symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            m: checked_symmetric(m)?,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn eigen(&self) -> Result<SymEigen> {
        jacobi_eigen(&self.m)
    }
}

/// A symmetric positive-definite matrix with its eigendecomposition.
///
/// The decomposition is computed once in the constructor; afterwards the
/// value is immutable and freely shareable across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
    eig: SymEigen,
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let m = checked_symmetric(m)?;
        let eig = jacobi_eigen(&m)?;
        check_positive(&eig)?;
        Ok(Self { m, eig })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: DMatrix::identity(n, n),
            eig: SymEigen {
                values: nalgebra::DVector::from_element(n, 1.0),
                vectors: DMatrix::identity(n, n),
            },
        }
    }

    /// Builds `V diag(values) V^T` from a decomposition with positive spectrum.
    pub fn from_eigen(eig: SymEigen) -> Result<Self> {
        check_positive(&eig)?;
        let m = eig.map(|x| x);
        Ok(Self { m, eig })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eig
    }

    pub fn condition_number(&self) -> f64 {
        self.eig.max_value() / self.eig.min_value()
    }

    pub fn inverse(&self) -> SpdMatrix {
        spd_power(self, -1.0)
    }
}

fn check_positive(eig: &SymEigen) -> Result<()> {
    match eig
        .values
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0) || !v.is_finite())
    {
        Some((index, &value)) => Err(Error::NotPositiveDefinite { index, value }),
        None => Ok(()),
    }
}

/// Principal matrix logarithm.
pub fn spd_log(m: &SpdMatrix) -> SymMatrix {
    SymMatrix {
        m: m.eig.map(f64::ln),
    }
}

/// Matrix exponential of a symmetric matrix.
pub fn spd_exp(m: &SymMatrix) -> Result<SpdMatrix> {
    let eig = m.eigen()?;
    let values = eig.values.map(f64::exp);
    SpdMatrix::from_eigen(SymEigen {
        values,
        vectors: eig.vectors,
    })
}

/// Real power `M^p`.
pub fn spd_power(m: &SpdMatrix, p: f64) -> SpdMatrix {
    let mut values = m.eig.values.map(|x| x.powf(p));
    let vectors = if p < 0.0 {
        // keep the ascending order invariant
        let n = values.len();
        let mut v = DMatrix::zeros(n, n);
        for k in 0..n {
            v.set_column(k, &m.eig.vectors.column(n - 1 - k));
        }
        values = nalgebra::DVector::from_iterator(n, (0..n).map(|k| values[n - 1 - k]));
        v
    } else {
        m.eig.vectors.clone()
    };
    let eig = SymEigen { values, vectors };
    let mat = eig.map(|x| x);
    SpdMatrix { m: mat, eig }
}

/// Which derivative operator a divided-difference kernel belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeKernel {
    /// Frechet derivative of `exp` at `log Theta`.
    Psi,
    /// Frechet derivative of `log` at `Theta`; inverse of `Psi`.
    H,
    /// Middle factor of the expected Hessian.
    Xi,
}

/// Divided difference for distinct eigenvalues.
pub fn kernel_generic(kind: DerivativeKernel, a: f64, b: f64) -> f64 {
    // ln(a/b) via ln_1p keeps relative accuracy for close eigenvalues
    let diff = a - b;
    let dlog = (diff / b).ln_1p();
    match kind {
        DerivativeKernel::Psi => diff / dlog,
        DerivativeKernel::H => dlog / diff,
        // a/b + b/a - 2 == (a - b)^2 / (ab), without the cancellation
        DerivativeKernel::Xi => diff * diff / (a * b * dlog * dlog),
    }
}

/// Second-order expansion around `a == b`; exact when the eigenvalues coincide.
pub fn kernel_near_equal(kind: DerivativeKernel, a: f64, b: f64) -> f64 {
    let x = a.ln() - b.ln();
    let g = (a * b).sqrt();
    match kind {
        DerivativeKernel::Psi => g * (1.0 + x * x / 24.0),
        DerivativeKernel::H => (1.0 - x * x / 24.0) / g,
        DerivativeKernel::Xi => 1.0 + x * x / 12.0,
    }
}

pub fn kernel_entry(kind: DerivativeKernel, a: f64, b: f64) -> f64 {
    if (a - b).abs() <= EQUAL_EIG_RTOL * a.max(b) {
        kernel_near_equal(kind, a, b)
    } else {
        kernel_generic(kind, a, b)
    }
}

/// `F[a, b] = f(lambda_a, lambda_b)` over the eigenvalues of `theta`.
pub fn kernel_matrix(theta: &SpdMatrix, kind: DerivativeKernel) -> DMatrix<f64> {
    let lam = &theta.eig.values;
    let n = lam.len();
    DMatrix::from_fn(n, n, |a, b| kernel_entry(kind, lam[a], lam[b]))
}

/// `unvec(Op(Theta) vec X)` evaluated as `V (F o (V^T X V)) V^T`.
pub fn apply_derivative(
    theta: &SpdMatrix,
    kind: DerivativeKernel,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = theta.dim();
    if x.nrows() != n || x.ncols() != n {
        return Err(dim_mismatch(
            format!("{n}x{n}"),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    let v = &theta.eig.vectors;
    let f = kernel_matrix(theta, kind);
    let inner = v.transpose() * x * v;
    let weighted = inner.component_mul(&f);
    Ok(v * weighted * v.transpose())
}

fn materialize(theta: &SpdMatrix, kind: DerivativeKernel) -> DMatrix<f64> {
    let v = &theta.eig.vectors;
    let n = theta.dim();
    let f = kernel_matrix(theta, kind);
    let vv = v.kronecker(v);
    let mut scaled = vv.clone();
    for p in 0..n {
        for q in 0..n {
            let mut col = scaled.column_mut(p * n + q);
            col *= f[(p, q)];
        }
    }
    let mut out = scaled * vv.transpose();
    symmetrize_in_place(&mut out);
    out
}

/// `Psi(Theta)`, an `n^2 x n^2` symmetric positive-definite matrix.
pub fn psi_operator(theta: &SpdMatrix) -> DMatrix<f64> {
    materialize(theta, DerivativeKernel::Psi)
}

/// `H(Theta) = Psi(Theta)^-1`.
pub fn h_operator(theta: &SpdMatrix) -> DMatrix<f64> {
    materialize(theta, DerivativeKernel::H)
}

/// `Xi(Theta)`.
pub fn xi_operator(theta: &SpdMatrix) -> DMatrix<f64> {
    materialize(theta, DerivativeKernel::Xi)
}
