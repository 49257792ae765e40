use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use kronfit::design::{kronecker_sum, DesignMatrix, FactorDims};
use kronfit::infer::chi2_sf;
use kronfit::kalg::vech;
use kronfit::matfun::{h_operator, psi_operator, spd_exp, spd_log, xi_operator, SpdMatrix, SymMatrix};
use kronfit::shrink::{minimize_lambda2, renormalize, shrink_factor_2x2, shrink_objective};

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.3
    })
}

fn dims_and_theta() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop_oneof![Just(vec![2, 2]), Just(vec![2, 3]), Just(vec![3, 2]), Just(vec![2, 2, 2])].prop_flat_map(|d| {
        let s = FactorDims::new(d.clone()).unwrap().num_params();
        (Just(d), prop::collection::vec(-0.6f64..0.6, s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_inverts_log(m in (1usize..6).prop_flat_map(spd)) {
        let x = SpdMatrix::new(m.clone()).unwrap();
        let back = spd_exp(&spd_log(&x)).unwrap();
        prop_assert!((back.as_matrix() - &m).amax() < 1e-10 * m.amax());
    }

    #[test]
    fn derivative_operators_are_consistent(m in (1usize..5).prop_flat_map(spd)) {
        let x = SpdMatrix::new(m).unwrap();
        let n = x.dim();
        let psi = psi_operator(&x);
        let h = h_operator(&x);
        let xi = xi_operator(&x);
        prop_assert!((&h * &psi - DMatrix::identity(n * n, n * n)).amax() < 1e-8);
        prop_assert!((&xi - xi.transpose()).amax() < 1e-12 * xi.amax());
        // Xi eigenvalues are >= 1
        prop_assert!(xi.symmetric_eigen().eigenvalues.min() > 1.0 - 1e-9);
    }

    #[test]
    fn design_round_trips((d, theta) in dims_and_theta()) {
        let fd = FactorDims::new(d).unwrap();
        let e = DesignMatrix::build(&fd);
        let theta = DVector::from_vec(theta);
        let omega = e.theta_to_omega(&theta).unwrap();
        let logs = e.theta_to_factor_logs(&theta).unwrap();
        prop_assert!((kronecker_sum(&fd, &logs).unwrap() - omega.as_matrix()).amax() < 1e-12);
        prop_assert!((e.theta_from_factor_logs(&logs).unwrap() - &theta).amax() < 1e-12);
        let back = e.project_vech(&vech(omega.as_matrix()).unwrap()).unwrap();
        prop_assert!((back - &theta).amax() < 1e-10);
    }

    #[test]
    fn renormalised_model_is_a_correlation((d, theta) in dims_and_theta()) {
        let e = DesignMatrix::build(&FactorDims::new(d).unwrap());
        let (model, dev) = e.theta_to_correlation(&DVector::from_vec(theta)).unwrap();
        let worst = model.as_matrix().diagonal().iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
        prop_assert_eq!(dev, worst);
        let corr = renormalize(&model).unwrap();
        let m = corr.as_matrix();
        prop_assert!(m.diagonal().iter().all(|x| (x - 1.0).abs() < 1e-12));
        prop_assert!(m.clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn shrunk_factor_is_a_correlation(a in -3.0f64..1.0, b in -2.0f64..2.0, c in -3.0f64..1.0) {
        let target = Vector3::new(a, b, c);
        let (params, corr) = shrink_factor_2x2(&target);
        prop_assert_eq!(corr[(0, 0)], 1.0);
        prop_assert_eq!(corr[(1, 1)], 1.0);
        prop_assert!(corr[(0, 1)].abs() < 1.0);
        let best = shrink_objective(&target, params.lambda2);
        for t in [-5.0, -1.0, -0.1, 0.0, 0.3, 0.6] {
            prop_assert!(best <= shrink_objective(&target, t) + 1e-12);
        }
        prop_assert_eq!(minimize_lambda2(&target), params.lambda2);
    }

    #[test]
    fn chi2_tail_decreases(df in 1usize..60, x in 0.0f64..100.0, dx in 0.01f64..5.0) {
        let k = df as f64;
        prop_assert!(chi2_sf(x + dx, k) <= chi2_sf(x, k));
        prop_assert!((0.0..=1.0).contains(&chi2_sf(x, k)));
    }
}

#[test]
fn symmetric_wrapper_rejects_asymmetry() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
    assert!(SymMatrix::new(m).is_err());
}
