//! Sample moments of a panel: mean, covariance, correlation, the fourth-moment
//! matrix `V` of `vec(y y^T)`, and the derivative of the log-correlation with
//! respect to the covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::kalg::{commutation, diag_select, duplication, duplication_pinv};
use crate::matfun::{h_operator, jacobi_eigen, symmetrize_in_place, SpdMatrix};

/// Default relative floor on the smallest covariance eigenvalue (times `trace / n`).
pub const DEFAULT_COV_FLOOR: f64 = 1e-10;

/// Whether the variances `D` are estimated from the data or known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    KnownD,
    #[default]
    EstimatedD,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::KnownD => "known-d",
            Regime::EstimatedD => "estimated-d",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known-d" => Ok(Regime::KnownD),
            "estimated-d" => Ok(Regime::EstimatedD),
            _ => Err(Error::InvalidConfig(format!(
                "unknown regime '{s}' (expected known-d or estimated-d)"
            ))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `T x n` observations, rows are time.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    data: DMatrix<f64>,
    names: Option<Vec<String>>,
}

impl Panel {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InvalidPanel(format!("need T >= 2, got {}", data.nrows())));
        }
        if data.ncols() < 2 {
            return Err(Error::InvalidPanel(format!("need n >= 2, got {}", data.ncols())));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidPanel(format!("non-finite entry at row {r}, column {c}")));
        }
        Ok(Self { data, names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n() {
            return Err(dim_mismatch(format!("{} names", self.n()), names.len()));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn t(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }
}

#[derive(Clone, Debug)]
pub struct MomentOptions {
    /// Center at a known mean instead of the sample mean (simulation only).
    pub known_mean: Option<DVector<f64>>,
    /// True variances, enabling the known-D regime.
    pub known_d: Option<DVector<f64>>,
    /// Replace the empirical `V` by the Gaussian form `(I + K)(Sigma (x) Sigma)`.
    pub gaussian_v: bool,
    /// Relative eigenvalue floor for the covariance.
    pub cov_floor: f64,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self {
            known_mean: None,
            known_d: None,
            gaussian_v: false,
            cov_floor: DEFAULT_COV_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MomentSet {
    pub t: usize,
    pub mean: DVector<f64>,
    /// Centered second moment with divisor `T`.
    pub sigma_hat: SpdMatrix,
    pub d_hat: DVector<f64>,
    /// Sample correlation `D^-1/2 Sigma D^-1/2` with the estimated `D`.
    pub theta_hat: SpdMatrix,
    /// Fourth-moment matrix (`n^2 x n^2`) used for variances.
    pub v_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub known_d: Option<DVector<f64>>,
}

impl MomentSet {
    pub fn n(&self) -> usize {
        self.d_hat.len()
    }

    /// The variances used to scale `Sigma` under `regime`.
    pub fn scale_for(&self, regime: Regime) -> Result<&DVector<f64>> {
        match regime {
            Regime::EstimatedD => Ok(&self.d_hat),
            Regime::KnownD => self.known_d.as_ref().ok_or_else(|| {
                Error::InvalidConfig("known-d regime requires the true variances".into())
            }),
        }
    }

    /// `D^-1/2 Sigma D^-1/2` under `regime`; unit-diagonal only for estimated D.
    pub fn theta_for(&self, regime: Regime) -> Result<SpdMatrix> {
        match regime {
            Regime::EstimatedD => Ok(self.theta_hat.clone()),
            Regime::KnownD => {
                let d = self.scale_for(regime)?;
                SpdMatrix::new(scale_sym(self.sigma_hat.as_matrix(), d))
            }
        }
    }

    /// Derivative of `vec log(theta_for(regime))` with respect to `vec Sigma`.
    pub fn log_jacobian(&self, regime: Regime) -> Result<DMatrix<f64>> {
        let theta = self.theta_for(regime)?;
        let d = self.scale_for(regime)?;
        match regime {
            Regime::EstimatedD => correlation_jacobian(&theta, d),
            Regime::KnownD => Ok(scale_kron_cols(&h_operator(&theta), d)),
        }
    }
}

/// `D^-1/2 M D^-1/2`.
fn scale_sym(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
    symmetrize_in_place(&mut out);
    out
}

/// `M (D^-1/2 (x) D^-1/2)`.
fn scale_kron_cols(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = d.len();
    let mut out = m.clone();
    for j in 0..n {
        for i in 0..n {
            let mut col = out.column_mut(j * n + i);
            col /= (d[i] * d[j]).sqrt();
        }
    }
    out
}

fn check_positive(d: &DVector<f64>) -> Result<()> {
    match d.iter().enumerate().find(|(_, &x)| !(x > 0.0) || !x.is_finite()) {
        Some((index, &value)) => Err(Error::NonPositiveDiagonal { index, value }),
        None => Ok(()),
    }
}

/// `P = I - D_n D_n^+ (I (x) Theta) M_d`.
pub fn p_matrix(theta: &SpdMatrix) -> DMatrix<f64> {
    let n = theta.dim();
    let nn = n * n;
    let eye = DMatrix::<f64>::identity(n, n);
    let i_kron_theta = eye.kronecker(theta.as_matrix());
    let rhs = diag_select(n).right_mul(&i_kron_theta);
    let proj = duplication(n).mul(&duplication_pinv(n).mul(&rhs));
    DMatrix::identity(nn, nn) - proj
}

/// `H(Theta) P (D^-1/2 (x) D^-1/2)`: derivative of `vec log corr(Sigma)`.
pub fn correlation_jacobian(theta: &SpdMatrix, d: &DVector<f64>) -> Result<DMatrix<f64>> {
    if d.len() != theta.dim() {
        return Err(dim_mismatch(theta.dim(), d.len()));
    }
    check_positive(d)?;
    let hp = h_operator(theta) * p_matrix(theta);
    Ok(scale_kron_cols(&hp, d))
}

/// Gaussian fourth-moment matrix `2 D_n D_n^+ (Sigma (x) Sigma) = (I + K)(Sigma (x) Sigma)`.
pub fn gaussian_v(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let ss = sigma.kronecker(sigma);
    let mut v = commutation(sigma.nrows()).mul(&ss) + &ss;
    symmetrize_in_place(&mut v);
    v
}

/// `(1/T) sum_t vec(y y^T) vec(y y^T)^T - vec(Sigma) vec(Sigma)^T` over centered rows.
pub fn fourth_moment(centered: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, n) = centered.shape();
    let mut z = DMatrix::zeros(t, n * n);
    for r in 0..t {
        for j in 0..n {
            for i in 0..n {
                z[(r, j * n + i)] = centered[(r, i)] * centered[(r, j)];
            }
        }
    }
    let s = DVector::from_column_slice(sigma.as_slice());
    let mut v = z.tr_mul(&z) / t as f64 - &s * s.transpose();
    symmetrize_in_place(&mut v);
    v
}

pub fn compute_moments(panel: &Panel) -> Result<MomentSet> {
    compute_moments_with(panel, &MomentOptions::default())
}

pub fn compute_moments_with(panel: &Panel, opts: &MomentOptions) -> Result<MomentSet> {
    let (t, n) = (panel.t(), panel.n());
    let y = panel.data();
    let mean = match &opts.known_mean {
        Some(mu) => {
            if mu.len() != n {
                return Err(dim_mismatch(n, mu.len()));
            }
            mu.clone()
        }
        None => DVector::from_iterator(n, y.column_iter().map(|c| c.mean())),
    };
    if let Some(d) = &opts.known_d {
        if d.len() != n {
            return Err(dim_mismatch(n, d.len()));
        }
        check_positive(d)?;
    }
    let mut centered = y.clone();
    for (mut row, _) in centered.row_iter_mut().zip(0..t) {
        row -= mean.transpose();
    }
    let mut sigma = centered.tr_mul(&centered) / t as f64;
    symmetrize_in_place(&mut sigma);

    let eig = jacobi_eigen(&sigma)?;
    let floor = opts.cov_floor * sigma.trace() / n as f64;
    let min_eig = eig.min_value();
    if !(min_eig > floor) {
        let scale = (sigma.trace() / n as f64).max(f64::MIN_POSITIVE);
        return Err(Error::SingularCovariance {
            min_eig,
            floor,
            suggested_ridge: (floor - min_eig).max(0.0) + 1e-6 * scale,
        });
    }
    let sigma_hat = SpdMatrix::new(sigma)?;
    let d_hat = sigma_hat.as_matrix().diagonal();
    let theta_hat = {
        let mut c = scale_sym(sigma_hat.as_matrix(), &d_hat);
        c.fill_diagonal(1.0);
        SpdMatrix::new(c)?
    };
    let v_hat = if opts.gaussian_v {
        gaussian_v(sigma_hat.as_matrix())
    } else {
        fourth_moment(&centered, sigma_hat.as_matrix())
    };
    let p_hat = p_matrix(&theta_hat);
    Ok(MomentSet {
        t,
        mean,
        sigma_hat,
        d_hat,
        theta_hat,
        v_hat,
        p_hat,
        known_d: opts.known_d.clone(),
    })
}
