//! Kronecker factor structure and the design matrix `E`.
//!
//! For `Theta = Theta_1 (x) ... (x) Theta_v` the log decomposes as a Kronecker
//! sum `Omega = sum_j I (x) log Theta_j (x) I`. The free parameters are the
//! `vech` entries of each factor log, with the `(1,1)` entry of factors
//! `1..v-1` pinned to zero; without the pinning, shifting a multiple of the
//! identity between two factors would leave `Omega` unchanged.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::kalg::{kron, unvech, vech, vech_len};
use crate::matfun::{spd_exp, SpdMatrix, SymMatrix};

pub const DEFAULT_DIM_CAP: usize = 512;

/// Ordered factor dimensions `(n_1, .., n_v)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FactorDims {
    dims: Vec<usize>,
}

impl FactorDims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        Self::with_cap(dims, DEFAULT_DIM_CAP)
    }

    pub fn with_cap(dims: Vec<usize>, cap: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDims("at least one factor is required".into()));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidDims(format!("factor dimension {d} < 2")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= cap)
            .ok_or_else(|| Error::InvalidDims(format!("product of {dims:?} exceeds cap {cap}")))?;
        debug_assert!(n >= 2);
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_factors(&self) -> usize {
        self.dims.len()
    }

    /// Total dimension `n = prod n_j`.
    pub fn n(&self) -> usize {
        self.dims.iter().product()
    }

    /// Number of free log-parameters `s`.
    pub fn num_params(&self) -> usize {
        self.dims.iter().map(|&d| vech_len(d)).sum::<usize>() - (self.dims.len() - 1)
    }

    /// Over-identifying restrictions `n(n+1)/2 - s`.
    pub fn overid_df(&self) -> usize {
        vech_len(self.n()) - self.num_params()
    }

    pub fn all_two(&self) -> bool {
        self.dims.iter().all(|&d| d == 2)
    }
}

impl TryFrom<Vec<usize>> for FactorDims {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FactorDims> for Vec<usize> {
    fn from(d: FactorDims) -> Self {
        d.dims
    }
}

impl fmt::Display for FactorDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Parses `2x2x3`.
impl FromStr for FactorDims {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(['x', 'X'])
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidDims(format!("cannot parse '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }
}

/// One free parameter: entry `(row, col)` (`row >= col`) of factor `factor`'s log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub factor: usize,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}[{},{}]", self.factor + 1, self.row + 1, self.col + 1)
    }
}

/// `vech(Omega(theta)) = E theta`, plus the parameter bookkeeping.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    dims: FactorDims,
    e: DMatrix<f64>,
    slots: Vec<ParamSlot>,
    pinned: Vec<ParamSlot>,
    // (E^T E)^-1 E^T, used for the least-squares read-off
    e_pinv: DMatrix<f64>,
}

fn basis(d: usize, p: usize, q: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(d, d);
    b[(p, q)] = 1.0;
    b[(q, p)] = 1.0;
    b
}

/// `I_left (x) m (x) I_right` for factor `j`.
fn embed(dims: &[usize], j: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let left: usize = dims[..j].iter().product();
    let right: usize = dims[j + 1..].iter().product();
    kron(&kron(&DMatrix::identity(left, left), m), &DMatrix::identity(right, right))
}

/// `sum_j I (x) L_j (x) I`.
pub fn kronecker_sum(dims: &FactorDims, logs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    check_factor_shapes(dims, logs)?;
    let n = dims.n();
    let mut out = DMatrix::zeros(n, n);
    for (j, l) in logs.iter().enumerate() {
        out += embed(dims.dims(), j, l);
    }
    Ok(out)
}

/// `M_1 (x) ... (x) M_v`.
pub fn kronecker_product(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    mats.iter()
        .fold(DMatrix::identity(1, 1), |acc, m| kron(&acc, m))
}

fn check_factor_shapes(dims: &FactorDims, mats: &[DMatrix<f64>]) -> Result<()> {
    if mats.len() != dims.num_factors() {
        return Err(dim_mismatch(
            format!("{} factors", dims.num_factors()),
            format!("{} factors", mats.len()),
        ));
    }
    for (m, &d) in mats.iter().zip(dims.dims()) {
        if m.nrows() != d || m.ncols() != d {
            return Err(dim_mismatch(
                format!("{d}x{d}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
    }
    Ok(())
}

/// Numerical rank from singular values, relative threshold `max(r,c) * eps`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let tol = smax * f64::EPSILON * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&x| x > tol).count()
}

/// Incidence of the factor diagonal log-entries on the diagonal of `Omega`:
/// an `n x sum n_j` 0/1 matrix.
pub fn diagonal_incidence(dims: &FactorDims) -> DMatrix<f64> {
    let n = dims.n();
    let total: usize = dims.dims().iter().sum();
    let mut a = DMatrix::zeros(n, total);
    for k in 0..n {
        // mixed-radix digits of k, first factor most significant
        let mut rem = k;
        let mut offset = total;
        for &d in dims.dims().iter().rev() {
            offset -= d;
            a[(k, offset + rem % d)] = 1.0;
            rem /= d;
        }
    }
    a
}

impl DesignMatrix {
    pub fn build(dims: &FactorDims) -> DesignMatrix {
        let v = dims.num_factors();
        let m = vech_len(dims.n());
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(dims.num_params());
        let mut slots = Vec::with_capacity(dims.num_params());
        let mut pinned = Vec::new();
        for (j, &d) in dims.dims().iter().enumerate() {
            for q in 0..d {
                for p in q..d {
                    let slot = ParamSlot { factor: j, row: p, col: q };
                    if p == 0 && q == 0 && j + 1 < v {
                        pinned.push(slot);
                        continue;
                    }
                    let full = embed(dims.dims(), j, &basis(d, p, q));
                    cols.push(vech(&full).expect("square"));
                    slots.push(slot);
                }
            }
        }
        let e = DMatrix::from_columns(&cols);
        debug_assert_eq!(e.nrows(), m);
        let ete = e.transpose() * &e;
        let e_pinv = ete
            .cholesky()
            .expect("design has full column rank")
            .solve(&e.transpose());
        DesignMatrix {
            dims: dims.clone(),
            e,
            slots,
            pinned,
            e_pinv,
        }
    }

    pub fn dims(&self) -> &FactorDims {
        &self.dims
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn num_params(&self) -> usize {
        self.e.ncols()
    }

    pub fn num_moments(&self) -> usize {
        self.e.nrows()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Entries fixed to zero by the identification convention.
    pub fn pinned(&self) -> &[ParamSlot] {
        &self.pinned
    }

    pub fn labels(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.to_string()).collect()
    }

    pub fn rank(&self) -> usize {
        numerical_rank(&self.e)
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(dim_mismatch(self.num_params(), theta.len()));
        }
        Ok(())
    }

    /// `vech(Omega) = E theta`.
    pub fn theta_to_vech(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        Ok(&self.e * theta)
    }

    pub fn theta_to_omega(&self, theta: &DVector<f64>) -> Result<SymMatrix> {
        let v = self.theta_to_vech(theta)?;
        SymMatrix::new(unvech(&v, self.dims.n())?)
    }

    /// `exp(Omega(theta))` and its largest deviation of a diagonal entry from 1.
    pub fn theta_to_correlation(&self, theta: &DVector<f64>) -> Result<(SpdMatrix, f64)> {
        let theta_mat = spd_exp(&self.theta_to_omega(theta)?)?;
        let dev = theta_mat
            .as_matrix()
            .diagonal()
            .iter()
            .map(|d| (d - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((theta_mat, dev))
    }

    /// Per-factor logs `L_j` with the pinned entries at zero.
    pub fn theta_to_factor_logs(&self, theta: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_theta(theta)?;
        let mut logs: Vec<DMatrix<f64>> = self
            .dims
            .dims()
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect();
        for (slot, &x) in self.slots.iter().zip(theta.iter()) {
            let l = &mut logs[slot.factor];
            l[(slot.row, slot.col)] = x;
            l[(slot.col, slot.row)] = x;
        }
        Ok(logs)
    }

    /// Parameter vector for arbitrary factor logs. The `(1,1)` entries of the
    /// leading factors are moved into the last factor as multiples of `I`,
    /// which leaves the Kronecker sum unchanged.
    pub fn theta_from_factor_logs(&self, logs: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        check_factor_shapes(&self.dims, logs)?;
        let v = self.dims.num_factors();
        let mut logs: Vec<DMatrix<f64>> = logs.to_vec();
        for j in 0..v - 1 {
            let c = logs[j][(0, 0)];
            let dj = self.dims.dims()[j];
            logs[j] -= DMatrix::<f64>::identity(dj, dj) * c;
            let dl = self.dims.dims()[v - 1];
            logs[v - 1] += DMatrix::<f64>::identity(dl, dl) * c;
        }
        Ok(DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|s| logs[s.factor][(s.row, s.col)]),
        ))
    }

    /// Least-squares projection `E^+ vech(Omega)`.
    pub fn project_vech(&self, vech_omega: &DVector<f64>) -> Result<DVector<f64>> {
        if vech_omega.len() != self.num_moments() {
            return Err(dim_mismatch(self.num_moments(), vech_omega.len()));
        }
        Ok(&self.e_pinv * vech_omega)
    }

    /// Factor logs read off `omega`; exact for Kronecker sums, otherwise the
    /// least-squares projection onto the model span.
    pub fn omega_to_factors(&self, omega: &SymMatrix) -> Result<Vec<DMatrix<f64>>> {
        let n = self.dims.n();
        if omega.dim() != n {
            return Err(dim_mismatch(format!("{n}x{n}"), format!("{0}x{0}", omega.dim())));
        }
        let theta = self.project_vech(&vech(omega.as_matrix())?)?;
        self.theta_to_factor_logs(&theta)
    }
}
