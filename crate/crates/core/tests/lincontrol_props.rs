use nalgebra::{DMatrix, DVector};
use powersat::lincontrol::*;
use powersat::model::{LinearPlant, PowerBudget};
use powersat::optim::solve_lyapunov;
use powersat::powerlim::{psat, PsatMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

fn random_matrix(rng: &mut StdRng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn random_spd(rng: &mut StdRng, n: usize, shift: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n, 1.0);
    &a * a.transpose() + DMatrix::identity(n, n) * shift
}

fn random_plant(rng: &mut StdRng) -> LinearPlant {
    let (n_u, n_a) = (1, 2);
    let n = n_u + n_a;
    LinearPlant::new(
        random_spd(rng, n, 0.5),
        random_spd(rng, n, 0.0),
        random_spd(rng, n, 0.0),
        DVector::zeros(n),
        n_u,
        n_a,
    )
    .unwrap()
}

fn random_controller(rng: &mut StdRng, n: usize, n_a: usize, n_c: usize, aw: AntiWindup) -> DynController {
    DynController {
        a_c: random_matrix(rng, n_c, n_c, 1.0),
        b_p: random_matrix(rng, n_c, n, 1.0),
        b_d: random_matrix(rng, n_c, n, 1.0),
        c: random_matrix(rng, n_a, n_c, 1.0),
        k_p: random_matrix(rng, n_a, n, 2.0),
        k_d: random_matrix(rng, n_a, n, 2.0),
        antiwindup: aw,
    }
}

fn one_dof() -> LinearPlant {
    LinearPlant::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.05),
        DMatrix::zeros(1, 1),
        DVector::zeros(1),
        0,
        1,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn projector_is_an_orthogonal_nullspace_projector(seed in any::<u64>(), n_a in 1usize..6, n_c in 1usize..8, mask in any::<usize>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let c = random_matrix(&mut rng, n_a, n_c, 3.0);
        let h = SaturationIndexSet::from_mask(mask % (1 << n_a), n_a);
        let p = nullspace_projector(&c, &h);
        prop_assert!((&p * &p - &p).amax() < 1e-10);
        prop_assert!((&p - p.transpose()).amax() < 1e-10);
        for &i in h.indices() {
            prop_assert!((c.row(i) * &p).amax() < 1e-10);
        }
        // Vectors orthogonal to the selected rows pass through unchanged.
        let v = random_matrix(&mut rng, n_c, 1, 1.0);
        let pv = &p * &v;
        prop_assert!((&p * &pv - &pv).amax() < 1e-10);
    }
}

/// Closed-loop rate with a fixed saturating set and an explicit mismatch,
/// assembled from the plant and controller equations.
fn rate_with(plant: &LinearPlant, ctrl: &DynController, h: &SaturationIndexSet, x: &DVector<f64>, sig: &DVector<f64>) -> DVector<f64> {
    let (n, n_c) = (plant.dof(), ctrl.n_c());
    let q = x.rows(0, n).into_owned();
    let v = x.rows(n, n).into_owned();
    let xc = x.rows(2 * n, n_c).into_owned();
    let (rc, u) = match &ctrl.antiwindup {
        AntiWindup::Modern { .. } => maw_controller_rate(ctrl, &xc, &q, &v, sig).unwrap(),
        AntiWindup::ConditionalIntegration => (ci_controller_rate(ctrl, &xc, &q, &v, h), ctrl.output(&xc, &q, &v)),
        AntiWindup::None => (ctrl.nominal_rate(&xc, &q, &v), ctrl.output(&xc, &q, &v)),
    };
    let acc = plant.acceleration(&q, &v, &(u + sig)).unwrap();
    let mut out = DVector::zeros(x.len());
    out.rows_mut(0, n).copy_from(&v);
    out.rows_mut(n, n).copy_from(&acc);
    out.rows_mut(2 * n, n_c).copy_from(&rc);
    out
}

fn fd_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-6;
    let f0 = f(x).len();
    let mut j = DMatrix::zeros(f0, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        j.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

#[test]
fn assembled_matrices_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(7);
    for trial in 0..20 {
        let plant = random_plant(&mut rng);
        let aw = match trial % 3 {
            0 => AntiWindup::None,
            1 => AntiWindup::ConditionalIntegration,
            _ => AntiWindup::Modern { e_c: random_matrix(&mut rng, 3, 2, 1.0), e: random_matrix(&mut rng, 2, 2, 0.5) },
        };
        let ctrl = random_controller(&mut rng, 3, 2, 3, aw);
        let h = SaturationIndexSet::from_mask(trial % 4, 2);
        let cl = closed_loop_matrices(&plant, &ctrl, &h).unwrap();
        let x = random_matrix(&mut rng, 9, 1, 1.0).column(0).into_owned();
        let s0 = DVector::zeros(2);
        let ja = fd_jacobian(&|x| rate_with(&plant, &ctrl, &h, x, &s0), &x);
        assert!((&ja - &cl.a).amax() < 1e-6, "A mismatch {}", (&ja - &cl.a).amax());
        let jb = fd_jacobian(&|s| rate_with(&plant, &ctrl, &h, &x, s), &s0);
        assert!((&jb - &cl.b).amax() < 1e-6, "B mismatch");
        assert_eq!(cl.kappa, ctrl.kappa());
    }
}

#[test]
fn printed_velocity_block_signs_give_the_wrong_jacobian() {
    let plant = one_dof();
    let ctrl = DynController::static_pd(DMatrix::from_element(1, 1, -100.0), DMatrix::from_element(1, 1, -20.0));
    let cl = closed_loop_matrices(&plant, &ctrl, &SaturationIndexSet::empty()).unwrap();
    // M⁻¹(K_p + K) would be −100 and M⁻¹(K_d + D) would be −19.95.
    assert_eq!(cl.a[(1, 0)], -100.0);
    assert!((cl.a[(1, 1)] - (-20.05)).abs() < 1e-12);
}

#[test]
fn sector_bounds_hold_inside_the_polytope() {
    let plant = one_dof();
    let ctrl = DynController::pid(400.0, 800.0, 40.0, AntiWindup::ConditionalIntegration);
    let budget = PowerBudget::uniform(1, 50.0, 0.0, 2.0).unwrap();
    let gamma = 0.6;
    let kappa = ctrl.kappa();
    let mut rng = StdRng::seed_from_u64(3);
    let mut tested = 0;
    while tested < 10_000 {
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let u = (&kappa * &x)[0];
        if x[1].abs() > 2.0 || (gamma * u).abs() > 50.0 / 2.0 {
            continue;
        }
        tested += 1;
        let p = psat(u, x[1], &budget.joint(0), PsatMode::ExactLossless).unwrap();
        let s = sigma(&x, &plant, &ctrl, &budget, PsatMode::ExactLossless).unwrap()[0];
        assert!((s - (p - u)).abs() < 1e-12);
        if u >= 0.0 {
            assert!(gamma * u <= p + 1e-12 && p <= u);
            assert!(-(1.0 - gamma) * u <= s + 1e-12 && s <= 0.0);
        } else {
            assert!(u <= p && p <= gamma * u + 1e-12);
            assert!(0.0 <= s && s <= -(1.0 - gamma) * u + 1e-12);
        }
    }
}

#[test]
fn sector_fails_beyond_the_no_load_speed() {
    // Outside |q̇| ≤ v̄ the limited torque can drop below γu.
    let budget = PowerBudget::uniform(1, 50.0, 0.0, 2.0).unwrap();
    let (gamma, u, v) = (0.9, 25.0 / 0.9, 10.0);
    let p = psat(u, v, &budget.joint(0), PsatMode::ExactLossless).unwrap();
    assert!(p < gamma * u);
}

#[test]
fn ellipsoid_test_matches_schur_complement() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(2..6);
        let w = random_spd(&mut rng, n, 0.1) * rng.gen_range(0.01..2.0);
        let h = random_matrix(&mut rng, 3, n, 1.0);
        let g = DVector::from_fn(3, |_, _| rng.gen_range(0.05..0.95));
        let (ok, _, margins) = ellipsoid_in_polytope(&w, &h, &g).unwrap();
        let mut all = true;
        for i in 0..3 {
            let gh = h.row(i) * g[i];
            let mut blk = DMatrix::zeros(n + 1, n + 1);
            blk[(0, 0)] = 1.0;
            blk.view_mut((0, 1), (1, n)).copy_from(&(&gh * &w));
            blk.view_mut((1, 0), (n, 1)).copy_from(&(&w * gh.transpose()));
            blk.view_mut((1, 1), (n, n)).copy_from(&w);
            let psd = blk.symmetric_eigen().eigenvalues.min() >= -1e-10;
            if margins[i].abs() > 1e-8 {
                assert_eq!(psd, margins[i] >= 0.0);
            }
            all &= margins[i] >= 0.0;
        }
        assert_eq!(ok, all);
    }
}

#[test]
fn scaling_the_ellipsoid_flips_the_binding_row() {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
    let g = DVector::from_vec(vec![0.5, 0.5]);
    let mut s = 1e-3;
    while ellipsoid_in_polytope(&(DMatrix::identity(2, 2) * s), &h, &g).unwrap().0 {
        s *= 1.1;
    }
    let (_, binding, _) = ellipsoid_in_polytope(&(DMatrix::identity(2, 2) * s), &h, &g).unwrap();
    assert_eq!(binding, 1);
}

#[test]
fn roa_volume_matches_eigenvalues() {
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..50 {
        let w = random_spd(&mut rng, 5, 0.2);
        let want: f64 = w.clone().symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum();
        assert!((roa_volume(&w).unwrap() - want).abs() < 1e-10);
    }
}

fn lyapunov_problem(a: &DMatrix<f64>, gamma: f64, n_a: usize) -> CertificateProblem {
    let n = a.nrows();
    let q = solve_lyapunov(a, &DMatrix::identity(n, n)).unwrap();
    CertificateProblem { q, gamma: DVector::from_element(n_a, gamma), alpha: 1.0 }
}

#[test]
fn certificate_on_a_stable_uncontrolled_plant() {
    let plant = LinearPlant::new(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 2.0,
        DMatrix::identity(2, 2) * 3.0,
        DVector::zeros(2),
        0,
        2,
    )
    .unwrap();
    let ctrl = DynController::static_pd(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
    let budget = PowerBudget::uniform(2, 100.0, 0.0, 5.0).unwrap();
    let cl = closed_loop_matrices(&plant, &ctrl, &SaturationIndexSet::empty()).unwrap();
    let prob = lyapunov_problem(&cl.a, 0.5, 2);
    let rep = certificate_check(&plant, &ctrl, &budget, &prob, VertexEnumeration::AllSubsets).unwrap();
    assert!(rep.holds);
    assert_eq!(rep.cases.len(), 9);
}

#[test]
fn certificate_rejects_destabilizing_gains() {
    let plant = one_dof();
    // Positive position feedback: the nominal loop is unstable.
    let ctrl = DynController::static_pd(DMatrix::from_element(1, 1, 50.0), DMatrix::from_element(1, 1, -10.0));
    let budget = PowerBudget::uniform(1, 100.0, 0.0, 5.0).unwrap();
    let prob = CertificateProblem {
        q: DMatrix::identity(2, 2),
        gamma: DVector::from_element(1, 0.5),
        alpha: 1.0,
    };
    let rep = certificate_check(&plant, &ctrl, &budget, &prob, VertexEnumeration::Matched).unwrap();
    assert!(!rep.holds);
    assert!(rep.worst_eigenvalue > 0.0);
    assert_eq!(rep.cases.len(), 2);
}

#[test]
fn certificate_report_for_pid_with_conditional_integration() {
    let plant = one_dof();
    let (wn, zeta) = (50.0 * std::f64::consts::PI, 0.8);
    let ctrl = DynController::pid(wn * wn, wn * wn * 5.0, 2.0 * zeta * wn - 0.05, AntiWindup::ConditionalIntegration);
    let budget = PowerBudget::uniform(1, 400.0, 0.0, 4.0).unwrap();
    let cl = closed_loop_matrices(&plant, &ctrl, &SaturationIndexSet::empty()).unwrap();
    let prob = lyapunov_problem(&cl.a, 0.5, 1);
    let rep = certificate_check(&plant, &ctrl, &budget, &prob, VertexEnumeration::Matched).unwrap();
    assert_eq!(rep.cases.len(), 2);
    assert!(rep.cases.iter().all(|c| c.2.is_finite()));
    let json = serde_json::to_string(&rep).unwrap();
    assert!(json.contains("worst_eigenvalue"));
}

#[test]
fn certified_ellipsoid_is_invariant_under_simulation() {
    let plant = one_dof();
    let ctrl = DynController::static_pd(DMatrix::from_element(1, 1, -350.0), DMatrix::from_element(1, 1, -95.0));
    let budget = PowerBudget::uniform(1, 50.0, 0.0, 2.0).unwrap();
    // A certificate found by random search over (Q, γ) whose ellipsoid reaches
    // into the region where the limit binds.
    let mut prob = CertificateProblem {
        q: DMatrix::from_row_slice(2, 2, &[14.86, 3.28, 3.28, 1.0]),
        gamma: DVector::from_element(1, 0.22),
        alpha: 1.0,
    };
    let rep = certificate_check(&plant, &ctrl, &budget, &prob, VertexEnumeration::AllSubsets).unwrap();
    assert!(rep.holds, "{rep:?}");

    // Largest level keeping the ellipsoid inside the sector polytope and the
    // no-load speed slab.
    let qinv = prob.q.clone().try_inverse().unwrap();
    let h = polytope_rows(&ctrl, &budget);
    let hq = (h.row(0) * &qinv * h.row(0).transpose())[(0, 0)];
    let sector = 1.0 / (prob.gamma[0] * prob.gamma[0] * hq);
    let slab = 2.0 * 2.0 / qinv[(1, 1)];
    prob.alpha = sector.min(slab);
    let (inside, _, _) = ellipsoid_in_polytope(&prob.w().unwrap(), &h, &prob.gamma).unwrap();
    assert!(inside);

    let mut rng = StdRng::seed_from_u64(21);
    let mut saturated = 0;
    for _ in 0..40 {
        let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let v = (dir.transpose() * &prob.q * &dir)[(0, 0)];
        let x0 = dir * (0.999 * (prob.alpha / v).sqrt());
        let traj = simulate_closed_loop(&x0, &plant, &ctrl, &budget, PsatMode::ExactLossless, 1e-4, 5_000).unwrap();
        let lyap: Vec<f64> = traj.iter().map(|x| (x.transpose() * &prob.q * x)[(0, 0)]).collect();
        for w in lyap.windows(2) {
            assert!(w[1] <= w[0] + 1e-6 * lyap[0]);
        }
        saturated += traj
            .iter()
            .filter(|x| sigma(x, &plant, &ctrl, &budget, PsatMode::ExactLossless).unwrap()[0] != 0.0)
            .count();
    }
    assert!(saturated > 0, "the limit never bound");
}

#[test]
fn inactive_antiwindup_matches_the_nominal_loop_bitwise() {
    let plant = one_dof();
    let budget = PowerBudget::uniform(1, 1e9, 0.0, 1e3).unwrap();
    let base = DynController::pid(100.0, 50.0, 20.0, AntiWindup::None);
    let x0 = DVector::from_vec(vec![0.3, -0.1, 0.05]);
    let run = |c: &DynController| simulate_closed_loop(&x0, &plant, c, &budget, PsatMode::ExactLossless, 1e-3, 2000).unwrap();
    let nominal = run(&base);
    let ci = run(&base.clone().with_antiwindup(AntiWindup::ConditionalIntegration));
    let maw = run(&base.clone().with_antiwindup(AntiWindup::Modern { e_c: DMatrix::zeros(1, 1), e: DMatrix::zeros(1, 1) }));
    assert_eq!(nominal, ci);
    assert_eq!(nominal, maw);
}

#[test]
fn conditional_integration_freezes_the_integrator_while_binding() {
    let plant = one_dof();
    let budget = PowerBudget::uniform(1, 20.0, 0.0, 4.0).unwrap();
    let ctrl = DynController::pid(400.0, 400.0, 40.0, AntiWindup::ConditionalIntegration);
    // Unit step expressed as an initial error.
    let x0 = DVector::from_vec(vec![-1.0, 0.0, 0.0]);
    let dt = 1e-4;
    let traj = simulate_closed_loop(&x0, &plant, &ctrl, &budget, PsatMode::ExactLossless, dt, 10_000).unwrap();
    let binding = |x: &DVector<f64>| {
        let u = (ctrl.kappa() * x)[0];
        u * x[1] > 20.0
    };
    let mut frozen_steps = 0;
    for w in traj.windows(2) {
        // RK4 stages stay in the binding region well inside a binding interval.
        if binding(&w[0]) && binding(&w[1]) && (ctrl.kappa() * &w[0])[0] * w[0][1] > 21.0 {
            assert_eq!(w[0][2], w[1][2]);
            frozen_steps += 1;
        }
    }
    assert!(frozen_steps > 100, "{frozen_steps}");
}
