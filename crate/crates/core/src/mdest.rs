//! Closed-form minimum-distance estimator and its sandwich variance.
//!
//! `theta_hat = argmin (y - E theta)^T W (y - E theta)` with
//! `y = vech(log Theta_hat)`. The normal equations are solved through an SVD
//! of `R E` (`W = R^T R`) so `E^T W E` is never inverted directly. `W` may be
//! semi-definite, as the optimal weight is under estimated variances.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{dim_mismatch, Error, Result};
use crate::infer::{clipped_pinv, s_matrix, CLIP_RTOL};
use crate::kalg::vech;
use crate::matfun::{jacobi_eigen, spd_log, symmetrize_in_place, SpdMatrix};
use crate::moments::{MomentSet, Regime};

/// Relative singular-value threshold for the weighted design.
const RANK_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightSpec {
    Identity,
    /// A user-supplied `n(n+1)/2` square SPD matrix.
    Supplied(DMatrix<f64>),
    /// Pseudo-inverse of the estimated `S`, eigenvalues below `1e-10 * max` dropped.
    FeasibleOptimal,
}

impl WeightSpec {
    pub fn label(&self) -> &'static str {
        match self {
            WeightSpec::Identity => "identity",
            WeightSpec::Supplied(_) => "supplied",
            WeightSpec::FeasibleOptimal => "optimal",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MdEstimate {
    pub theta: DVector<f64>,
    /// Asymptotic variance of `sqrt(T) (theta_hat - theta)`.
    pub j: DMatrix<f64>,
    pub regime: Regime,
    pub weight: String,
    /// Residual `vech(log Theta_hat) - E theta_hat`.
    pub residual: DVector<f64>,
    pub t: usize,
    /// Eigenvalues of `S` dropped when forming the optimal weight.
    pub clipped: usize,
}

impl MdEstimate {
    /// Standard errors `sqrt(diag(J) / T)`.
    pub fn std_errors(&self) -> DVector<f64> {
        self.j.diagonal().map(|x| (x.max(0.0) / self.t as f64).sqrt())
    }

    /// `c^T theta` and its standard error.
    pub fn contrast(&self, c: &DVector<f64>) -> Result<(f64, f64)> {
        if c.len() != self.theta.len() {
            return Err(dim_mismatch(self.theta.len(), c.len()));
        }
        let var = (c.transpose() * &self.j * c)[0];
        Ok((c.dot(&self.theta), (var.max(0.0) / self.t as f64).sqrt()))
    }
}

/// Solved weighted least-squares system.
pub struct WeightedSolve {
    pub theta: DVector<f64>,
    /// `(E^T W E)^-1 E^T W`.
    pub projector: DMatrix<f64>,
    /// `(E^T W E)^-1`.
    pub bread: DMatrix<f64>,
}

/// Solves `min_theta (y - E theta)^T W (y - E theta)`.
pub fn weighted_solve(e: &DMatrix<f64>, w: &DMatrix<f64>, y: &DVector<f64>) -> Result<WeightedSolve> {
    let (m, s) = e.shape();
    if w.shape() != (m, m) {
        return Err(dim_mismatch(format!("{m}x{m} weight"), format!("{}x{}", w.nrows(), w.ncols())));
    }
    if y.len() != m {
        return Err(dim_mismatch(m, y.len()));
    }
    let root = weight_root(w)?;
    let a = &root * e;
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&x| x > RANK_RTOL * smax).count();
    if rank < s || smax == 0.0 {
        return Err(Error::SingularNormalEquations { rank, params: s });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v requested");
    // A = U diag(sv) V^T ;  (A^T A)^-1 = V diag(sv^-2) V^T ;  A^+ = V diag(1/sv) U^T
    let v = vt.transpose();
    let mut v_inv = v.clone();
    let mut v_inv2 = v.clone();
    for k in 0..s {
        v_inv.column_mut(k).scale_mut(1.0 / sv[k]);
        v_inv2.column_mut(k).scale_mut(1.0 / (sv[k] * sv[k]));
    }
    let a_pinv = &v_inv * u.transpose();
    let projector = &a_pinv * &root;
    let theta = &projector * y;
    let mut bread = v_inv2 * v.transpose();
    symmetrize_in_place(&mut bread);
    Ok(WeightedSolve {
        theta,
        projector,
        bread,
    })
}

/// `R` with `R^T R = W`: the Cholesky factor when `W` is definite, otherwise
/// `diag(sqrt(lambda)) U^T` over the positive eigenpairs.
fn weight_root(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = w.clone().cholesky() {
        return Ok(chol.l().transpose());
    }
    let eig = jacobi_eigen(w)?;
    let max = eig.max_value();
    if !(max > 0.0) || eig.min_value() < -RANK_RTOL * max * w.nrows() as f64 {
        return Err(Error::NotPositiveDefinite {
            index: 0,
            value: eig.min_value(),
        });
    }
    let keep: Vec<usize> = (0..eig.dim()).filter(|&k| eig.values[k] > RANK_RTOL * max).collect();
    Ok(DMatrix::from_fn(keep.len(), w.ncols(), |r, c| {
        let k = keep[r];
        eig.values[k].sqrt() * eig.vectors[(c, k)]
    }))
}

/// `vech(log Theta)` under `regime`.
pub fn log_target(moments: &MomentSet, regime: Regime) -> Result<DVector<f64>> {
    let theta = moments.theta_for(regime)?;
    vech(spd_log(&theta).as_matrix())
}

/// Resolves `spec` into a concrete weight matrix and the count of dropped eigenvalues.
pub fn weight_matrix(
    spec: &WeightSpec,
    moments: &MomentSet,
    design: &DesignMatrix,
    regime: Regime,
) -> Result<(DMatrix<f64>, usize)> {
    let m = design.num_moments();
    match spec {
        WeightSpec::Identity => Ok((DMatrix::identity(m, m), 0)),
        WeightSpec::Supplied(w) => {
            if w.shape() != (m, m) {
                return Err(dim_mismatch(
                    format!("{m}x{m} weight"),
                    format!("{}x{}", w.nrows(), w.ncols()),
                ));
            }
            Ok((SpdMatrix::new(w.clone())?.into_inner(), 0))
        }
        WeightSpec::FeasibleOptimal => {
            let s = s_matrix(moments, regime)?;
            let (w, rank) = clipped_pinv(&s, CLIP_RTOL)?;
            Ok((w, m - rank))
        }
    }
}

/// `J = B S B^T` with `B = (E^T W E)^-1 E^T W`.
pub fn md_variance(
    moments: &MomentSet,
    design: &DesignMatrix,
    w: &DMatrix<f64>,
    regime: Regime,
) -> Result<DMatrix<f64>> {
    let y = log_target(moments, regime)?;
    let solve = weighted_solve(design.matrix(), w, &y)?;
    let s = s_matrix(moments, regime)?;
    Ok(sandwich(&solve.projector, &s))
}

pub(crate) fn sandwich(b: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut j = b * s * b.transpose();
    symmetrize_in_place(&mut j);
    j
}

pub fn md_estimate(
    moments: &MomentSet,
    design: &DesignMatrix,
    weight: &WeightSpec,
    regime: Regime,
) -> Result<MdEstimate> {
    let n = moments.n();
    if design.dims().n() != n {
        return Err(dim_mismatch(format!("{n} series"), format!("design for {}", design.dims().n())));
    }
    let y = log_target(moments, regime)?;
    let (w, clipped) = weight_matrix(weight, moments, design, regime)?;
    let solve = weighted_solve(design.matrix(), &w, &y)?;
    let s = s_matrix(moments, regime)?;
    let j = sandwich(&solve.projector, &s);
    let residual = &y - design.matrix() * &solve.theta;
    Ok(MdEstimate {
        theta: solve.theta,
        j,
        regime,
        weight: weight.label().to_string(),
        residual,
        t: moments.t,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::FactorDims;
    use crate::moments::{compute_moments, compute_moments_with, MomentOptions, Panel};
    use crate::matfun::spd_power;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design22() -> DesignMatrix {
        DesignMatrix::build(&FactorDims::new(vec![2, 2]).unwrap())
    }

    fn gaussian_panel(corr: &SpdMatrix, t: usize, seed: u64) -> Panel {
        let root = spd_power(corr, 0.5).into_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::<f64>::from_fn(t, corr.dim(), |_, _| StandardNormal.sample(&mut rng));
        Panel::new(z * root).unwrap()
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::<f64>::identity(n, n)
    }

    #[test]
    fn first_order_condition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e = design22();
        for _ in 0..10 {
            let w = random_spd(&mut rng, 10);
            let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let sol = weighted_solve(e.matrix(), &w, &y).unwrap();
            let foc = e.matrix().transpose() * &w * (&y - e.matrix() * &sol.theta);
            assert!(foc.amax() < 1e-10, "{}", foc.amax());
            let direct = (e.matrix().transpose() * &w * e.matrix()).try_inverse().unwrap();
            assert!((&sol.bread - direct).amax() < 1e-10);
        }
    }

    #[test]
    fn just_identified_is_weight_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let e = DesignMatrix::build(&FactorDims::new(vec![3]).unwrap());
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..5 {
            let w = random_spd(&mut rng, 6);
            let sol = weighted_solve(e.matrix(), &w, &y).unwrap();
            assert!((sol.theta - &y).amax() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let r = weighted_solve(&e, &DMatrix::identity(3, 3), &DVector::zeros(3));
        assert!(matches!(r, Err(Error::SingularNormalEquations { rank: 1, params: 2 })));
    }

    #[test]
    fn exact_kronecker_sample_recovers_theta() {
        // a panel whose sample correlation is exactly Kronecker: rows are
        // +/- columns of a square root of Theta, so Sigma_hat = Theta / (T/2)
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.4, -0.2, 0.1, -0.3, 0.25]);
        let (corr, _) = e.theta_to_correlation(&theta0).unwrap();
        let root = spd_power(&corr, 0.5).into_inner();
        let mut rows = Vec::new();
        for k in 0..4 {
            rows.push(root.column(k).transpose());
            rows.push(-root.column(k).transpose());
        }
        let panel = Panel::new(DMatrix::from_rows(&rows)).unwrap();
        let m = compute_moments(&panel).unwrap();
        let est = md_estimate(&m, &e, &WeightSpec::Identity, Regime::EstimatedD).unwrap();
        // the correlation is the renormalized exp(Omega); exactness holds after renormalizing theta0
        let (c_hat, _) = e.theta_to_correlation(&est.theta).unwrap();
        assert!((c_hat.as_matrix() - m.theta_hat.as_matrix()).amax() < 1e-10);
        assert!(est.residual.amax() < 1e-10);
    }

    #[test]
    fn variance_is_psd_for_all_weights() {
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.5, 0.0, 0.0, -0.3, 0.0]);
        let (c, _) = e.theta_to_correlation(&theta0).unwrap();
        let p = gaussian_panel(&c, 500, 23);
        let m = compute_moments(&p).unwrap();
        for w in [WeightSpec::Identity, WeightSpec::FeasibleOptimal] {
            let est = md_estimate(&m, &e, &w, Regime::EstimatedD).unwrap();
            let eig = est.j.clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() >= -1e-10 * est.j.trace() / 5.0);
            assert!(est.std_errors().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn optimal_weight_beats_identity_asymptotically() {
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.5, 0.1, 0.0, -0.3, -0.1]);
        let (c, _) = e.theta_to_correlation(&theta0).unwrap();
        let p = gaussian_panel(&c, 3000, 24);
        let opts = MomentOptions {
            known_d: Some(DVector::from_element(4, 1.0)),
            ..MomentOptions::default()
        };
        let m = compute_moments_with(&p, &opts).unwrap();
        let ji = md_estimate(&m, &e, &WeightSpec::Identity, Regime::KnownD).unwrap().j;
        let jo = md_estimate(&m, &e, &WeightSpec::FeasibleOptimal, Regime::KnownD).unwrap().j;
        let diff = (&ji - &jo).symmetric_eigen().eigenvalues;
        assert!(diff.min() > -1e-6 * ji.trace(), "{diff}");
    }

    #[test]
    fn supplied_weight_checks() {
        let e = design22();
        let c = SpdMatrix::identity(4);
        let m = compute_moments(&gaussian_panel(&c, 100, 25)).unwrap();
        let bad = WeightSpec::Supplied(DMatrix::identity(3, 3));
        assert!(md_estimate(&m, &e, &bad, Regime::EstimatedD).is_err());
        let w = WeightSpec::Supplied(DMatrix::identity(10, 10) * 2.0);
        let a = md_estimate(&m, &e, &w, Regime::EstimatedD).unwrap();
        let b = md_estimate(&m, &e, &WeightSpec::Identity, Regime::EstimatedD).unwrap();
        assert!((a.theta - b.theta).amax() < 1e-12);
    }
}
