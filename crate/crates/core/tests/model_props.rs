use nalgebra::DVector;
use powersat::model::{skew_symmetry_residual, two_link_model, LagrangianModel, TwoLinkArm, TwoLinkParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn skew_symmetry(q1 in -4.0..4.0f64, q2 in -4.0..4.0f64, v1 in -10.0..10.0f64, v2 in -10.0..10.0f64) {
        let arm = two_link_model();
        let q = DVector::from_vec(vec![q1, q2]);
        let qd = DVector::from_vec(vec![v1, v2]);
        prop_assert!(skew_symmetry_residual(&arm, &q, &qd, 1e-6).abs() < 1e-6);
    }

    #[test]
    fn mass_positive_definite(q1 in -4.0..4.0f64, q2 in -4.0..4.0f64) {
        let m = two_link_model().mass(&DVector::from_vec(vec![q1, q2]));
        prop_assert!(m.cholesky().is_some());
    }
}

/// Undamped, unforced arm: total energy is conserved by the dynamics.
#[test]
fn energy_drift_undamped() {
    let arm = TwoLinkArm::new(TwoLinkParams { d1: 0.0, d2: 0.0, ..TwoLinkParams::default() }).unwrap();
    let energy = |x: &DVector<f64>| {
        let (q, v) = (x.rows(0, 2).into_owned(), x.rows(2, 2).into_owned());
        arm.kinetic_energy(&q, &v) + arm.potential(&q)
    };
    let rhs = |x: &DVector<f64>| {
        let (q, v) = (x.rows(0, 2).into_owned(), x.rows(2, 2).into_owned());
        let a = arm.acceleration(&q, &v, &DVector::zeros(2)).unwrap();
        DVector::from_vec(vec![v[0], v[1], a[0], a[1]])
    };
    let mut x = DVector::from_vec(vec![-0.4, 1.2, 1.5, -2.0]);
    let e0 = energy(&x);
    let dt = 1e-4;
    for _ in 0..10_000 {
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (dt / 2.0)));
        let k3 = rhs(&(&x + &k2 * (dt / 2.0)));
        let k4 = rhs(&(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    assert!((energy(&x) - e0).abs() < 1e-4, "drift {}", energy(&x) - e0);
}
