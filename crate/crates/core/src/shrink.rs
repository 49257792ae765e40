//! Post-processing that restores unit diagonals.
//!
//! A 2x2 correlation matrix has eigenvalues `e^l1 + e^l2 = 2`, so its log is
//! `C (log(2 - e^t), t)` with `C = (1/2)[[1,1],[1,-1],[1,1]]` in `vech` order,
//! where `t = l2` and the eigenvectors are `(1, +/-1)/sqrt(2)`. Shrinkage
//! projects an unrestricted `vech(log Theta_j)` onto that curve.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::design::{kronecker_product, DesignMatrix};
use crate::error::{dim_mismatch, Error, Result};
use crate::matfun::{symmetrize_in_place, SpdMatrix};

/// Lower end of the search interval for `t`; `e^-20` is below any useful resolution.
pub const SEARCH_LOWER: f64 = -20.0;
const SCAN_POINTS: usize = 400;
const GOLDEN_ITERS: usize = 100;
const BISECTIONS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoByTwoFactorParams {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl TwoByTwoFactorParams {
    pub fn from_lambda2(lambda2: f64) -> Self {
        let lambda2 = lambda2.min(std::f64::consts::LN_2);
        Self {
            lambda1: (2.0 - lambda2.exp()).ln(),
            lambda2,
        }
    }

    /// `vech` of the factor log.
    pub fn log_vech(&self) -> Vector3<f64> {
        curve_matrix() * Vector2::new(self.lambda1, self.lambda2)
    }

    /// `[[1, r], [r, 1]]` with `r = (e^l1 - e^l2) / 2`.
    pub fn correlation(&self) -> DMatrix<f64> {
        let r = 0.5 * (self.lambda1.exp() - self.lambda2.exp());
        DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0])
    }
}

fn curve_matrix() -> nalgebra::Matrix3x2<f64> {
    nalgebra::Matrix3x2::new(0.5, 0.5, 0.5, -0.5, 0.5, 0.5)
}

fn residual(target: &Vector3<f64>, t: f64) -> Vector3<f64> {
    target - TwoByTwoFactorParams::from_lambda2(t).log_vech()
}

/// Squared distance from `target` to the curve at `t`.
pub fn shrink_objective(target: &Vector3<f64>, t: f64) -> f64 {
    residual(target, t).norm_squared()
}

fn objective_slope(target: &Vector3<f64>, t: f64) -> f64 {
    let e = t.exp();
    let du = -e / (2.0 - e);
    let r = residual(target, t);
    -2.0 * r.dot(&(curve_matrix() * Vector2::new(du, 1.0)))
}

/// Minimizes the distance over `t in [SEARCH_LOWER, log 2]`.
///
/// A coarse scan picks the bracket, golden-section narrows it and the sign of
/// the derivative is bisected to finish. The scan is uniform in
/// `z = atanh(r)` with `r = 1 - e^t` the implied correlation, so basins near
/// `r = -1` (where `t` crowds against `log 2`) are not stepped over.
pub fn minimize_lambda2(target: &Vector3<f64>) -> f64 {
    let hi = std::f64::consts::LN_2;
    let lo = SEARCH_LOWER;
    // t = log 2 - softplus(2z), decreasing in z
    let t_of = |z: f64| {
        let u = 2.0 * z;
        hi - (u.max(0.0) + (-u.abs()).exp().ln_1p())
    };
    let z_hi = 0.5 * (hi - lo).exp_m1().ln();
    let z_lo = -z_hi;
    let step = (z_hi - z_lo) / SCAN_POINTS as f64;
    let grid = |k: usize| if k == SCAN_POINTS { lo } else { t_of(z_lo + step * k as f64) };
    let best = (0..=SCAN_POINTS)
        .min_by(|&a, &b| shrink_objective(target, grid(a)).total_cmp(&shrink_objective(target, grid(b))))
        .expect("non-empty grid");
    let (mut a, mut b) = (grid((best + 1).min(SCAN_POINTS)), grid(best.saturating_sub(1)));

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    for _ in 0..GOLDEN_ITERS {
        if shrink_objective(target, c) < shrink_objective(target, d) {
            b = d;
        } else {
            a = c;
        }
        c = b - inv_phi * (b - a);
        d = a + inv_phi * (b - a);
    }
    let (mut a, mut b) = (a.max(lo), b.min(hi));
    let (sa, sb) = (objective_slope(target, a), objective_slope(target, b));
    if sa < 0.0 && sb > 0.0 {
        for _ in 0..BISECTIONS {
            let mid = 0.5 * (a + b);
            if objective_slope(target, mid) > 0.0 {
                b = mid;
            } else {
                a = mid;
            }
        }
    }
    let cand = 0.5 * (a + b);
    // the boundary can win when the minimum sits at the end of the interval
    [cand, lo, hi]
        .into_iter()
        .min_by(|&x, &y| shrink_objective(target, x).total_cmp(&shrink_objective(target, y)))
        .unwrap()
}

/// Nearest 2x2 correlation factor (in log space) to an unrestricted `vech(log Theta_j)`.
pub fn shrink_factor_2x2(theta_hat_block: &Vector3<f64>) -> (TwoByTwoFactorParams, DMatrix<f64>) {
    let params = TwoByTwoFactorParams::from_lambda2(minimize_lambda2(theta_hat_block));
    let corr = params.correlation();
    (params, corr)
}

#[derive(Clone, Debug)]
pub struct ShrunkModel {
    pub params: Vec<TwoByTwoFactorParams>,
    pub factors: Vec<DMatrix<f64>>,
    pub correlation: DMatrix<f64>,
}

/// Shrinks every factor of a model whose factors are all 2x2.
///
/// Only the sum of the factors' diagonal log-levels is identified, so each
/// block is first moved along the identity direction onto the curve's own
/// diagonal level for its off-diagonal entry. The curve has equal diagonals,
/// so this shift and the diagonal difference do not move the minimizer.
pub fn shrink_model(design: &DesignMatrix, theta_hat: &DVector<f64>) -> Result<ShrunkModel> {
    if let Some((factor, &dim)) = design.dims().dims().iter().enumerate().find(|(_, &d)| d != 2) {
        return Err(Error::UnsupportedFactorDim { factor, dim });
    }
    let logs = design.theta_to_factor_logs(theta_hat)?;
    let mut params = Vec::with_capacity(logs.len());
    let mut factors = Vec::with_capacity(logs.len());
    for l in &logs {
        let off = l[(1, 0)];
        let half_gap = 0.5 * (l[(1, 1)] - l[(0, 0)]);
        // diagonal log-level of the correlation whose log has off-diagonal `off`
        let r = off.tanh();
        let level = 0.5 * (1.0 - r * r).ln();
        let block = Vector3::new(level - half_gap, off, level + half_gap);
        let (p, f) = shrink_factor_2x2(&block);
        params.push(p);
        factors.push(f);
    }
    let correlation = kronecker_product(&factors);
    Ok(ShrunkModel {
        params,
        factors,
        correlation,
    })
}

/// `D^-1/2 M D^-1/2` with `D = diag(M)`; the diagonal is set to exactly 1.
pub fn renormalize(m: &SpdMatrix) -> Result<SpdMatrix> {
    let a = m.as_matrix();
    let d = a.diagonal();
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
        return Err(Error::NonPositiveDiagonal { index, value });
    }
    let n = a.nrows();
    let mut out = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt());
    symmetrize_in_place(&mut out);
    out.fill_diagonal(1.0);
    SpdMatrix::new(out)
}

/// Maximum deviation of the diagonal from 1.
pub fn diag_deviation(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(dim_mismatch("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.diagonal().iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::FactorDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_block_is_fixed() {
        let (p, c) = shrink_factor_2x2(&Vector3::zeros());
        assert!(p.lambda2.abs() < 1e-9);
        assert!((c - DMatrix::<f64>::identity(2, 2)).amax() < 1e-9);
    }

    #[test]
    fn closed_form_point() {
        let p = TwoByTwoFactorParams::from_lambda2(0.5f64.ln());
        assert!((p.lambda1 - 1.5f64.ln()).abs() < 1e-15);
        assert!((p.lambda1.exp() + p.lambda2.exp() - 2.0).abs() < 1e-12);
        let c = p.correlation();
        assert!((c[(0, 1)] - 0.5).abs() < 1e-15);
        let (q, c2) = shrink_factor_2x2(&p.log_vech());
        assert!((q.lambda2 - p.lambda2).abs() < 1e-9);
        assert!((c2 - c).amax() < 1e-9);
    }

    #[test]
    fn curve_log_matches_matrix_log() {
        let p = TwoByTwoFactorParams::from_lambda2(-0.8);
        let c = SpdMatrix::new(p.correlation()).unwrap();
        let l = crate::matfun::spd_log(&c).into_inner();
        let v = p.log_vech();
        assert!((l[(0, 0)] - v[0]).abs() < 1e-12);
        assert!((l[(1, 0)] - v[1]).abs() < 1e-12);
        assert!((l[(1, 1)] - v[2]).abs() < 1e-12);
    }

    #[test]
    fn perturbed_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let l2 = rng.random_range(-3.0..0.69);
            let p = TwoByTwoFactorParams::from_lambda2(l2);
            let noise = Vector3::from_fn(|_, _| rng.random_range(-1e-8..1e-8));
            let (q, _) = shrink_factor_2x2(&(p.log_vech() + noise));
            assert!((q.lambda2 - l2).abs() < 1e-6, "{} vs {l2}", q.lambda2);
        }
    }

    #[test]
    fn beats_dense_grid_and_local_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let hi = std::f64::consts::LN_2;
        for _ in 0..100 {
            let target = Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let t = minimize_lambda2(&target);
            assert!(t <= hi && t >= SEARCH_LOWER);
            let f = shrink_objective(&target, t);
            for dt in [-1e-4, 1e-4] {
                let u = (t + dt).clamp(SEARCH_LOWER, hi);
                assert!(f <= shrink_objective(&target, u) + 1e-15);
            }
            let grid_min = (0..=10_000)
                .map(|k| shrink_objective(&target, SEARCH_LOWER + (hi - SEARCH_LOWER) * k as f64 / 1e4))
                .fold(f64::INFINITY, f64::min);
            assert!(f <= grid_min + 1e-12);
        }
    }

    #[test]
    fn shrunk_model_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let e = DesignMatrix::build(&FactorDims::new(vec![2, 2]).unwrap());
        for _ in 0..20 {
            let theta = DVector::from_fn(5, |_, _| rng.random_range(-0.8..0.8));
            let m = shrink_model(&e, &theta).unwrap();
            assert!(diag_deviation(&m.correlation).unwrap() < 1e-12);
            assert!(SpdMatrix::new(m.correlation.clone()).is_ok());
        }
        let id = shrink_model(&e, &DVector::zeros(5)).unwrap();
        assert!((id.correlation - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
    }

    #[test]
    fn shrunk_model_recovers_kronecker_factors() {
        let e = DesignMatrix::build(&FactorDims::new(vec![2, 2, 2]).unwrap());
        let rs = [0.6, -0.3, 0.85];
        let factors: Vec<DMatrix<f64>> = rs
            .iter()
            .map(|&r| DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]))
            .collect();
        let logs: Vec<DMatrix<f64>> = factors
            .iter()
            .map(|f| crate::matfun::spd_log(&SpdMatrix::new(f.clone()).unwrap()).into_inner())
            .collect();
        let theta = e.theta_from_factor_logs(&logs).unwrap();
        let m = shrink_model(&e, &theta).unwrap();
        for (got, want) in m.factors.iter().zip(&factors) {
            assert!((got - want).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_larger_factors() {
        let e = DesignMatrix::build(&FactorDims::new(vec![2, 3]).unwrap());
        let err = shrink_model(&e, &DVector::zeros(e.num_params())).unwrap_err();
        assert_eq!(err, Error::UnsupportedFactorDim { factor: 1, dim: 3 });
    }

    #[test]
    fn renormalize_cases() {
        let m = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0])).unwrap();
        let r = renormalize(&m).unwrap();
        assert!((r.as_matrix()[(0, 1)] - 0.5).abs() < 1e-15);
        let c = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0])).unwrap();
        assert_eq!(renormalize(&c).unwrap().as_matrix(), c.as_matrix());
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let s = SpdMatrix::new(&a * a.transpose() + DMatrix::<f64>::identity(4, 4) * 0.1).unwrap();
            let r = renormalize(&s).unwrap();
            assert!(r.eigen().min_value() > 0.0);
            assert_eq!(diag_deviation(r.as_matrix()).unwrap(), 0.0);
        }
    }
}
