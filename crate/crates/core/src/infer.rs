//! Inference: the moment variance `S`, contrast intervals, joint Wald tests
//! and the over-identification test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::{erf::erfc, gamma::gamma_ur};

use crate::design::{numerical_rank, DesignMatrix};
use crate::error::{dim_mismatch, Error, Result};
use crate::kalg::duplication_pinv;
use crate::matfun::{jacobi_eigen, symmetrize_in_place};
use crate::mdest::{log_target, weighted_solve, MdEstimate, sandwich};
use crate::moments::{MomentSet, Regime};

/// Eigenvalues of `S` below `CLIP_RTOL * max` are treated as zero.
pub const CLIP_RTOL: f64 = 1e-10;

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(0.5 * df, 0.5 * x).clamp(0.0, 1.0)
}

/// Upper tail of the standard normal distribution.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `D_n^+ G V G^T D_n^+T` for a Jacobian `G` of `vec log Theta` in `vec Sigma`.
pub fn s_matrix_from(g: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = (g.nrows() as f64).sqrt().round() as usize;
    let dg = duplication_pinv(n).mul(g);
    let mut s = &dg * v * dg.transpose();
    symmetrize_in_place(&mut s);
    s
}

/// Asymptotic variance of `sqrt(T) vech(log Theta_hat)` under `regime`.
pub fn s_matrix(moments: &MomentSet, regime: Regime) -> Result<DMatrix<f64>> {
    let g = moments.log_jacobian(regime)?;
    Ok(s_matrix_from(&g, &moments.v_hat))
}

/// Moore-Penrose inverse dropping eigenvalues below `rtol * max`, and its rank.
pub fn clipped_pinv(s: &DMatrix<f64>, rtol: f64) -> Result<(DMatrix<f64>, usize)> {
    let eig = jacobi_eigen(s)?;
    let floor = rtol * eig.max_value().max(0.0);
    let keep = |x: f64| x >= floor && x > 0.0;
    let rank = eig.values.iter().filter(|&&x| keep(x)).count();
    Ok((eig.map(|x| if keep(x) { 1.0 / x } else { 0.0 }), rank))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Degrees of freedom of the reference distribution.
    pub df: usize,
    /// `n(n+1)/2 - s`.
    pub nominal_df: usize,
    pub p_chi2: f64,
    pub z_diag: f64,
    /// One-sided upper-tail normal p-value of `z_diag`.
    pub p_normal: f64,
    pub p_normal_two_sided: f64,
    /// Eigenvalues of `S` dropped as numerically zero.
    pub clipped: usize,
    pub regime: Regime,
}

impl TestResult {
    fn from_statistic(statistic: f64, df: usize, nominal_df: usize, clipped: usize, regime: Regime) -> Self {
        let k = df as f64;
        let z = (statistic - k) / (2.0 * k).sqrt();
        TestResult {
            statistic,
            df,
            nominal_df,
            p_chi2: chi2_sf(statistic, k),
            z_diag: z,
            p_normal: normal_sf(z),
            p_normal_two_sided: (2.0 * normal_sf(z.abs())).min(1.0),
            clipped,
            regime,
        }
    }

    pub fn rejects(&self, level: f64) -> bool {
        self.p_chi2 < level
    }
}

/// Over-identification test `T g^T S^+ g` at the optimal weight `S^+`.
///
/// With estimated variances `S` has rank `n(n-1)/2`: a correlation matrix has
/// no free diagonal. The dropped directions carry no information, so the
/// statistic has `rank(S) - s` degrees of freedom rather than `n(n+1)/2 - s`.
pub fn overid_test(
    moments: &MomentSet,
    design: &DesignMatrix,
    regime: Regime,
) -> Result<(TestResult, MdEstimate)> {
    let nominal_df = design.dims().overid_df();
    let s = s_matrix(moments, regime)?;
    let (w, rank) = clipped_pinv(&s, CLIP_RTOL)?;
    let clipped = s.nrows() - rank;
    if nominal_df == 0 || rank <= design.num_params() {
        return Err(Error::NotOveridentified);
    }
    let df = rank - design.num_params();
    let y = log_target(moments, regime)?;
    let solve = weighted_solve(design.matrix(), &w, &y)?;
    let g = &y - design.matrix() * &solve.theta;
    let statistic = moments.t as f64 * (g.transpose() * &w * &g)[0];
    let j = sandwich(&solve.projector, &s);
    let est = MdEstimate {
        theta: solve.theta,
        j,
        regime,
        weight: "optimal".into(),
        residual: g,
        t: moments.t,
        clipped,
    };
    Ok((
        TestResult::from_statistic(statistic.max(0.0), df, nominal_df, clipped, regime),
        est,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `T (A^T theta - r)^T (A^T J A)^-1 (A^T theta - r)` against `chi2_k`.
pub fn wald_joint(
    theta: &DVector<f64>,
    j: &DMatrix<f64>,
    t: usize,
    a: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<WaldResult> {
    let s = theta.len();
    if a.nrows() != s || j.shape() != (s, s) {
        return Err(dim_mismatch(format!("{s} rows"), format!("{} rows", a.nrows())));
    }
    let k = a.ncols();
    if r.len() != k {
        return Err(dim_mismatch(k, r.len()));
    }
    if k == 0 || numerical_rank(a) < k {
        return Err(Error::RankDeficientContrast);
    }
    let middle = a.transpose() * j * a;
    let chol = middle.cholesky().ok_or(Error::RankDeficientContrast)?;
    let diff = a.transpose() * theta - r;
    let statistic = t as f64 * diff.dot(&chol.solve(&diff));
    Ok(WaldResult {
        statistic,
        df: k,
        p_value: chi2_sf(statistic, k as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Two-sided `level` interval `c^T theta +/- z sqrt(c^T V c / T)`.
pub fn contrast_interval(
    theta: &DVector<f64>,
    avar: &DMatrix<f64>,
    t: usize,
    c: &DVector<f64>,
    level: f64,
) -> Result<ContrastInterval> {
    if c.len() != theta.len() || avar.shape() != (theta.len(), theta.len()) {
        return Err(dim_mismatch(theta.len(), c.len()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level} not in (0,1)")));
    }
    let z = normal_quantile_upper((1.0 - level) / 2.0);
    let estimate = c.dot(theta);
    let std_error = ((c.transpose() * avar * c)[0].max(0.0) / t as f64).sqrt();
    Ok(ContrastInterval {
        estimate,
        std_error,
        lower: estimate - z * std_error,
        upper: estimate + z * std_error,
    })
}

/// `z` with `normal_sf(z) = p`, by bisection on the survival function.
pub fn normal_quantile_upper(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_sf(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
