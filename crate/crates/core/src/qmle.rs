//! Gaussian quasi-likelihood in the log-parameters and the one-step update.
//!
//! With `A = D^-1/2 Sigma D^-1/2` and `Omega = Omega(theta)`:
//!
//! ```text
//! l(theta)     = -(T/2) [ tr Omega + tr(A e^-Omega) ]
//! score(theta) =  (T/2) E^T D_n^T vec Psi[ e^-Omega A e^-Omega - e^-Omega ]
//! Upsilon      =  (1/2) E^T D_n^T Xi(e^Omega) D_n E
//! ```
//!
//! All derivative operators are applied in the eigenbasis; nothing here
//! materializes an `n^2 x n^2` matrix.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{dim_mismatch, Error, Result};
use crate::kalg::unvech;
use crate::matfun::{
    apply_derivative, jacobi_eigen, spd_exp, symmetrize_in_place, DerivativeKernel, SpdMatrix,
};
use crate::mdest::MdEstimate;
use crate::moments::{MomentSet, Regime};

#[derive(Clone, Debug)]
pub struct LikelihoodContext {
    pub design: DesignMatrix,
    pub d: DVector<f64>,
    pub a_matrix: SpdMatrix,
    pub t: usize,
}

impl LikelihoodContext {
    pub fn new(design: DesignMatrix, d: DVector<f64>, a_matrix: SpdMatrix, t: usize) -> Result<Self> {
        let n = design.dims().n();
        if a_matrix.dim() != n || d.len() != n {
            return Err(dim_mismatch(format!("{n} series"), format!("{} / {}", a_matrix.dim(), d.len())));
        }
        Ok(Self { design, d, a_matrix, t })
    }

    /// Context with `D` taken from `regime`.
    pub fn from_moments(moments: &MomentSet, design: &DesignMatrix, regime: Regime) -> Result<Self> {
        Self::new(
            design.clone(),
            moments.scale_for(regime)?.clone(),
            moments.theta_for(regime)?,
            moments.t,
        )
    }

    fn model(&self, theta: &DVector<f64>) -> Result<SpdMatrix> {
        spd_exp(&self.design.theta_to_omega(theta)?)
    }
}

/// Symmetric basis matrices `unvech(E_k)`, one per parameter.
fn parameter_directions(design: &DesignMatrix) -> Vec<DMatrix<f64>> {
    let n = design.dims().n();
    design
        .matrix()
        .column_iter()
        .map(|c| unvech(&c.into_owned(), n).expect("design rows match vech length"))
        .collect()
}

fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

pub fn loglik(ctx: &LikelihoodContext, theta: &DVector<f64>) -> Result<f64> {
    let omega = ctx.design.theta_to_omega(theta)?;
    let model = spd_exp(&omega)?;
    let inv = model.inverse();
    let tr_omega = omega.as_matrix().trace();
    let tr_a = frobenius(ctx.a_matrix.as_matrix(), inv.as_matrix());
    Ok(-0.5 * ctx.t as f64 * (tr_omega + tr_a))
}

pub fn score(ctx: &LikelihoodContext, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let model = ctx.model(theta)?;
    let inv = model.inverse().into_inner();
    let mut inner = &inv * ctx.a_matrix.as_matrix() * &inv - &inv;
    symmetrize_in_place(&mut inner);
    let grad = apply_derivative(&model, DerivativeKernel::Psi, &inner)?;
    let half_t = 0.5 * ctx.t as f64;
    let dirs = parameter_directions(&ctx.design);
    Ok(DVector::from_iterator(
        dirs.len(),
        dirs.iter().map(|m| half_t * frobenius(m, &grad)),
    ))
}

/// Expected Hessian per observation at `Theta(theta)`.
pub fn upsilon(design: &DesignMatrix, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let model = spd_exp(&design.theta_to_omega(theta)?)?;
    let dirs = parameter_directions(design);
    let applied = dirs
        .iter()
        .map(|m| apply_derivative(&model, DerivativeKernel::Xi, m))
        .collect::<Result<Vec<_>>>()?;
    let s = dirs.len();
    let mut u = DMatrix::from_fn(s, s, |l, k| 0.5 * frobenius(&dirs[l], &applied[k]));
    symmetrize_in_place(&mut u);
    Ok(u)
}

#[derive(Clone, Debug)]
pub struct OneStepEstimate {
    pub theta_tilde: DVector<f64>,
    pub upsilon: DMatrix<f64>,
    /// `Upsilon^-1 / T`.
    pub variance: DMatrix<f64>,
    /// Sandwich `Upsilon^-1 K V K^T Upsilon^-1`, valid without Gaussianity.
    pub robust_avar: Option<DMatrix<f64>>,
    pub t: usize,
}

impl OneStepEstimate {
    pub fn std_errors(&self) -> DVector<f64> {
        self.variance.diagonal().map(|x| x.max(0.0).sqrt())
    }

    /// `c^T theta_tilde` and `sqrt(c^T Upsilon^-1 c / T)`.
    pub fn contrast(&self, c: &DVector<f64>) -> Result<(f64, f64)> {
        if c.len() != self.theta_tilde.len() {
            return Err(dim_mismatch(self.theta_tilde.len(), c.len()));
        }
        let var = (c.transpose() * &self.variance * c)[0];
        Ok((c.dot(&self.theta_tilde), var.max(0.0).sqrt()))
    }
}

/// Newton step `theta_hat + Upsilon^-1 score / T` with `Upsilon` at `Theta(theta_hat)`.
///
/// The Hessian of the log-likelihood is `-T Upsilon`, so the ascent step adds
/// the scaled score.
pub fn one_step(md: &MdEstimate, ctx: &LikelihoodContext) -> Result<OneStepEstimate> {
    let u = upsilon(&ctx.design, &md.theta)?;
    let eig = jacobi_eigen(&u)?;
    let min_eig = eig.min_value();
    if !(min_eig > 0.0) {
        return Err(Error::HessianNotPd { min_eig });
    }
    let u_inv = eig.map(|x| 1.0 / x);
    let sc = score(ctx, &md.theta)?;
    let t = ctx.t as f64;
    let theta_tilde = &md.theta + &u_inv * sc / t;
    Ok(OneStepEstimate {
        theta_tilde,
        variance: &u_inv / t,
        upsilon: u,
        robust_avar: None,
        t: ctx.t,
    })
}

/// One-step estimate with the sandwich variance attached.
pub fn one_step_with_moments(
    md: &MdEstimate,
    ctx: &LikelihoodContext,
    moments: &MomentSet,
    regime: Regime,
) -> Result<OneStepEstimate> {
    let mut est = one_step(md, ctx)?;
    est.robust_avar = Some(robust_avar(ctx, &md.theta, &est.upsilon, moments, regime)?);
    Ok(est)
}

/// `Upsilon^-1 K V K^T Upsilon^-1` with
/// `K = (1/2) E^T D_n^T Psi (Theta^-1 (x) Theta^-1) G`, `G` the derivative of
/// `vec A` in `vec Sigma`.
pub fn robust_avar(
    ctx: &LikelihoodContext,
    theta: &DVector<f64>,
    upsilon: &DMatrix<f64>,
    moments: &MomentSet,
    regime: Regime,
) -> Result<DMatrix<f64>> {
    let model = ctx.model(theta)?;
    let inv = model.inverse().into_inner();
    let n = model.dim();
    let d = moments.scale_for(regime)?;
    let p = match regime {
        Regime::EstimatedD => Some(&moments.p_hat),
        Regime::KnownD => None,
    };
    let dirs = parameter_directions(&ctx.design);
    let mut k = DMatrix::zeros(dirs.len(), n * n);
    for (l, m) in dirs.iter().enumerate() {
        // row l of (1/2)(D_n E)^T Psi (Theta^-1 (x) Theta^-1), by self-adjointness
        let row = &inv * apply_derivative(&model, DerivativeKernel::Psi, m)? * &inv * 0.5;
        let mut r = DVector::from_column_slice(row.as_slice()).transpose();
        if let Some(p) = p {
            r = r * p;
        }
        for j in 0..n {
            for i in 0..n {
                r[j * n + i] /= (d[i] * d[j]).sqrt();
            }
        }
        k.set_row(l, &r);
    }
    let u_inv = jacobi_eigen(upsilon)?.map(|x| 1.0 / x);
    let mut avar = &u_inv * &k * &moments.v_hat * k.transpose() * &u_inv;
    symmetrize_in_place(&mut avar);
    Ok(avar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::FactorDims;
    use crate::kalg::duplication;
    use crate::matfun::{psi_operator, spd_power};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design22() -> DesignMatrix {
        DesignMatrix::build(&FactorDims::new(vec![2, 2]).unwrap())
    }

    fn random_theta(rng: &mut impl Rng, s: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(s, |_, _| rng.random_range(-scale..scale))
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> SpdMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::new(&a * a.transpose() / n as f64 + DMatrix::<f64>::identity(n, n) * 0.5).unwrap()
    }

    fn ctx(a: SpdMatrix, t: usize) -> LikelihoodContext {
        let n = a.dim();
        LikelihoodContext::new(design22(), DVector::from_element(n, 1.0), a, t).unwrap()
    }

    #[test]
    fn loglik_at_identity() {
        let c = ctx(SpdMatrix::identity(4), 100);
        assert!((loglik(&c, &DVector::zeros(5)).unwrap() + 200.0).abs() < 1e-12);
    }

    #[test]
    fn score_vanishes_at_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let e = design22();
        for _ in 0..10 {
            let theta = random_theta(&mut rng, 5, 0.6);
            let a = spd_exp(&e.theta_to_omega(&theta).unwrap()).unwrap();
            let t = 1000;
            let sc = score(&ctx(a, t), &theta).unwrap();
            assert!(sc.amax() < 1e-10 * t as f64, "{}", sc.amax());
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let c = ctx(random_spd(&mut rng, 4), 50);
            let theta = random_theta(&mut rng, 5, 0.5);
            let sc = score(&c, &theta).unwrap();
            let h = 1e-5;
            for k in 0..5 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (loglik(&c, &tp).unwrap() - loglik(&c, &tm).unwrap()) / (2.0 * h);
                assert!((fd - sc[k]).abs() <= 1e-6 * sc.amax(), "{fd} vs {}", sc[k]);
            }
        }
    }

    #[test]
    fn upsilon_matches_score_differences_at_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let e = design22();
        let t = 10;
        for _ in 0..5 {
            let theta = random_theta(&mut rng, 5, 0.5);
            let c = ctx(spd_exp(&e.theta_to_omega(&theta).unwrap()).unwrap(), t);
            let u = upsilon(&e, &theta).unwrap();
            let h = 1e-5;
            for k in 0..5 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let col = (score(&c, &tp).unwrap() - score(&c, &tm).unwrap()) / (2.0 * h * t as f64);
                let diff = (&col + u.column(k)).amax();
                assert!(diff <= 1e-5 * u.amax(), "{diff}");
            }
        }
    }

    #[test]
    fn upsilon_at_zero_and_fisher_equality() {
        let e = design22();
        let de = duplication(4).mul(e.matrix());
        let u0 = upsilon(&e, &DVector::zeros(5)).unwrap();
        assert!((&u0 - de.transpose() * &de * 0.5).amax() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..5 {
            let theta = random_theta(&mut rng, 5, 0.7);
            let model = spd_exp(&e.theta_to_omega(&theta).unwrap()).unwrap();
            let psi = psi_operator(&model);
            let inv = spd_power(&model, -1.0).into_inner();
            let rhs = de.transpose() * &psi * inv.kronecker(&inv) * &psi * &de * 0.5;
            let u = upsilon(&e, &theta).unwrap();
            assert!((&u - rhs).amax() < 1e-8);
            assert!((&u - u.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn loglik_maximized_at_exact_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let e = design22();
        let theta0 = random_theta(&mut rng, 5, 0.5);
        let c = ctx(spd_exp(&e.theta_to_omega(&theta0).unwrap()).unwrap(), 100);
        let l0 = loglik(&c, &theta0).unwrap();
        for _ in 0..50 {
            let th = &theta0 + random_theta(&mut rng, 5, 0.3);
            assert!(loglik(&c, &th).unwrap() <= l0);
        }
        let delta = random_theta(&mut rng, 5, 1.0);
        let h = 1e-3;
        let f = |x: f64| loglik(&c, &(&theta0 + &delta * x)).unwrap();
        assert!((f(h) - 2.0 * f(0.0) + f(-h)) / (h * h) <= 0.0);
    }

    #[test]
    fn one_step_is_fixed_point_on_exact_data() {
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.3, -0.1, 0.2, -0.4, 0.05]);
        let a = spd_exp(&e.theta_to_omega(&theta0).unwrap()).unwrap();
        let md = MdEstimate {
            theta: theta0.clone(),
            j: DMatrix::identity(5, 5),
            regime: Regime::KnownD,
            weight: "identity".into(),
            residual: DVector::zeros(10),
            t: 500,
            clipped: 0,
        };
        let os = one_step(&md, &ctx(a, 500)).unwrap();
        assert!((&os.theta_tilde - &theta0).amax() < 1e-12);
        let expected = os.upsilon.clone().try_inverse().unwrap() / 500.0;
        assert!((&os.variance - expected).amax() < 1e-12);
    }

    #[test]
    fn one_step_contracts_error_quadratically() {
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.3, -0.1, 0.2, -0.4, 0.05]);
        let a = spd_exp(&e.theta_to_omega(&theta0).unwrap()).unwrap();
        let dir = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.8, -0.2]);
        let err = |h: f64| {
            let md = MdEstimate {
                theta: &theta0 + &dir * h,
                j: DMatrix::identity(5, 5),
                regime: Regime::KnownD,
                weight: "identity".into(),
                residual: DVector::zeros(10),
                t: 500,
                clipped: 0,
            };
            (one_step(&md, &ctx(a.clone(), 500)).unwrap().theta_tilde - &theta0).norm()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 < 1e-2 * dir.norm() * 0.1, "{e1}");
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn robust_avar_reduces_to_inverse_upsilon_under_normality() {
        use crate::moments::{compute_moments_with, MomentOptions, Panel};
        let e = design22();
        let theta0 = DVector::from_vec(vec![0.3, -0.1, 0.2, -0.4, 0.05]);
        let model = spd_exp(&e.theta_to_omega(&theta0).unwrap()).unwrap();
        let root = spd_power(&model, 0.5).into_inner();
        // rows +/- columns of the root: second moment is model / 4
        let mut rows = Vec::new();
        for k in 0..4 {
            rows.push(root.column(k).transpose());
            rows.push(-root.column(k).transpose());
        }
        let opts = MomentOptions {
            known_mean: Some(DVector::zeros(4)),
            known_d: Some(DVector::from_element(4, 0.25)),
            gaussian_v: true,
            ..Default::default()
        };
        let m = compute_moments_with(&Panel::new(DMatrix::from_rows(&rows)).unwrap(), &opts).unwrap();
        let c = LikelihoodContext::from_moments(&m, &e, Regime::KnownD).unwrap();
        assert!((c.a_matrix.as_matrix() - model.as_matrix()).amax() < 1e-12);
        let u = upsilon(&e, &theta0).unwrap();
        let avar = robust_avar(&c, &theta0, &u, &m, Regime::KnownD).unwrap();
        let u_inv = u.try_inverse().unwrap();
        assert!((&avar - &u_inv).amax() < 1e-8 * u_inv.amax());
    }
}
