use nalgebra::{DMatrix, DVector};
use powersat::mpc::*;
use powersat::optim::SolveStatus;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_matrix(rng: &mut StdRng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn random_inputs(rng: &mut StdRng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

fn fin(steps: usize) -> FinExample {
    FinExample {
        steps,
        ..FinExample::default()
    }
}

/// Random plant with drift term and generic references.
fn random_horizon(rng: &mut StdRng, steps: usize) -> Horizon {
    let (nx, nu) = (4, 2);
    let fc = random_matrix(rng, nx, nx, 1.0) - DMatrix::identity(nx, nx);
    let hc = random_matrix(rng, nx, nu, 1.0);
    let gc = random_matrix(rng, nx, 1, 1.0).column(0).into_owned();
    let (f, h, g) = discretize_zoh(&fc, &hc, &gc, 0.05).unwrap();
    let spd = |rng: &mut StdRng, n: usize| {
        let a = random_matrix(rng, n, n, 1.0);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    };
    let mut hz = Horizon::regulation(
        f,
        h,
        g,
        spd(rng, nx),
        spd(rng, nu),
        spd(rng, nx),
        random_inputs(rng, nx, 1.0),
        steps,
        0.05,
    )
    .unwrap();
    hz.x_ref = (0..=steps).map(|_| random_inputs(rng, nx, 0.5)).collect();
    hz.u_ref = (0..steps).map(|_| random_inputs(rng, nu, 0.5)).collect();
    hz
}

/// Explicit Euler with torque held, as an oracle for the discretization.
fn euler(fc: &DMatrix<f64>, hc: &DMatrix<f64>, gc: &DVector<f64>, x0: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let steps = 10_000;
    let h = dt / steps as f64;
    let forcing = hc * u + gc;
    let mut x = x0.clone();
    for _ in 0..steps {
        x += (fc * &x + &forcing) * h;
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zoh_matches_fine_integration(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let fc = random_matrix(&mut rng, 3, 3, 1.0) - DMatrix::identity(3, 3);
        let hc = random_matrix(&mut rng, 3, 2, 1.0);
        let gc = random_inputs(&mut rng, 3, 1.0);
        let dt = 0.01;
        let (f, h, g) = discretize_zoh(&fc, &hc, &gc, dt).unwrap();
        let x0 = random_inputs(&mut rng, 3, 1.0);
        let u = random_inputs(&mut rng, 2, 1.0);
        let exact = &f * &x0 + &h * &u + &g;
        let approx = euler(&fc, &hc, &gc, &x0, &u, dt);
        prop_assert!((exact - approx).amax() < 1e-6);
    }

    #[test]
    fn condensed_prediction_matches_iteration(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let hz = random_horizon(&mut rng, 15);
        let m = HorizonMatrices::new(&hz).unwrap();
        let u = random_inputs(&mut rng, 30, 2.0);
        let stack = &m.x0_bar + &m.g_bar + &m.h_hat * &u;
        let xs = rollout(&hz.f, &hz.h, &hz.g, &hz.x0, &u).unwrap();
        for (k, x) in xs.iter().enumerate() {
            let err = (stack.rows(4 * k, 4) - x).amax();
            prop_assert!(err <= 1e-12 * (1.0 + x.amax()), "step {k}: {err:e}");
        }
    }

    #[test]
    fn matrix_cost_matches_rollout(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let hz = random_horizon(&mut rng, 12);
        let m = HorizonMatrices::new(&hz).unwrap();
        for _ in 0..10 {
            let u = random_inputs(&mut rng, 24, 3.0);
            let j = hz.cost(&u).unwrap();
            prop_assert!((m.cost(&u) - j).abs() <= 1e-8 * j.abs().max(1.0));
        }
    }

    #[test]
    fn power_form_matches_rollout(seed in any::<u64>(), n in 0usize..10) {
        let mut rng = StdRng::seed_from_u64(seed);
        let hz = random_horizon(&mut rng, 10);
        let v = DMatrix::from_fn(2, 4, |i, j| if j == 2 + i { 1.0 } else { 0.0 });
        let rbar = DVector::from_vec(vec![0.01, 0.2]);
        let (e, chi) = power_constraint_terms(&hz, &v, &rbar, n).unwrap();
        prop_assert!((&e - e.transpose()).amax() == 0.0);
        let u = random_inputs(&mut rng, 20, 5.0);
        let xs = hz.trajectory(&u).unwrap();
        let direct = stage_power(&(&v * &xs[n]), &u.rows(2 * n, 2).into_owned(), &rbar);
        let form = u.dot(&(&e * &u)) + chi.dot(&u);
        prop_assert!((form - direct).abs() <= 1e-9 * (1.0 + direct.abs()), "{form} vs {direct}");
    }

    #[test]
    fn lifted_state_constraints_are_equivalent(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let hz = random_horizon(&mut rng, 8);
        let a = random_matrix(&mut rng, 3, 4, 1.0);
        let b = DVector::from_element(3, 1.0);
        let (a_neq, b_neq) = lift_linear_constraints(&a, &b, &hz).unwrap();
        prop_assert_eq!(a_neq.shape(), (24, 16));
        for _ in 0..20 {
            let u = random_inputs(&mut rng, 16, 1.0);
            let lifted = &a_neq * &u - &b_neq;
            let xs = hz.trajectory(&u).unwrap();
            for k in 1..=8 {
                let direct = &a * &xs[k] - &b;
                prop_assert!((lifted.rows(3 * (k - 1), 3) - direct).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn lifted_mixed_constraints_are_equivalent(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let hz = random_horizon(&mut rng, 6);
        let ax = random_matrix(&mut rng, 2, 4, 1.0);
        let au = random_matrix(&mut rng, 2, 2, 1.0);
        let b = random_inputs(&mut rng, 2, 1.0);
        let (a_neq, b_neq) = lift_mixed_constraints(&ax, &au, &b, &hz).unwrap();
        let u = random_inputs(&mut rng, 12, 1.0);
        let xs = hz.trajectory(&u).unwrap();
        let lifted = &a_neq * &u - &b_neq;
        for k in 0..6 {
            let direct = &ax * &xs[k] + &au * u.rows(2 * k, 2) - &b;
            prop_assert!((lifted.rows(2 * k, 2) - direct).amax() < 1e-9);
        }
    }
}

#[test]
fn fin_matrix_cost_matches_rollout() {
    let hz = fin(40).horizon().unwrap();
    let m = HorizonMatrices::new(&hz).unwrap();
    assert!(m.zz.symmetric_eigenvalues().min() > 0.0);
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..100 {
        let u = random_inputs(&mut rng, 160, 180.0);
        let j = hz.cost(&u).unwrap();
        assert!((m.cost(&u) - j).abs() <= 1e-8 * j);
    }
}

#[test]
fn regulation_at_rest_costs_nothing() {
    let mut cfg = fin(10);
    cfg.x0 = vec![0.0; 8];
    let hz = cfg.horizon().unwrap();
    let (c, z, _) = assemble_cost(&hz).unwrap();
    assert_eq!(c, 0.0);
    assert_eq!(z.amax(), 0.0);
    assert_eq!(hz.cost(&DVector::zeros(40)).unwrap(), 0.0);
}

#[test]
fn unconstrained_lift_is_empty() {
    let hz = fin(5).horizon().unwrap();
    let (a, b) = lift_linear_constraints(&DMatrix::zeros(0, 8), &DVector::zeros(0), &hz).unwrap();
    assert_eq!(a.nrows(), 0);
    assert_eq!(b.len(), 0);
}

#[test]
fn fin_speed_rows_bound_velocity() {
    let cfg = fin(20);
    let hz = cfg.horizon().unwrap();
    let cons = cfg.constraints();
    let (a, b) = lift_linear_constraints(&cons.state_a, &cons.state_b, &hz).unwrap();
    let mut rng = StdRng::seed_from_u64(11);
    let (mut inside, mut outside) = (0, 0);
    for _ in 0..400 {
        let push = rng.gen_range(0.0..400.0);
        let u = random_inputs(&mut rng, 80, 20.0).add_scalar(push);
        let ok = (&a * &u - &b).max() <= 0.0;
        let xs = hz.trajectory(&u).unwrap();
        let fast = xs[1..].iter().any(|x| x.rows(4, 4).amax() > cfg.qdot_max);
        assert_eq!(ok, !fast);
        if ok {
            inside += 1;
        } else {
            outside += 1;
        }
    }
    assert!(inside > 0 && outside > 0);
}

#[test]
fn fin_power_terms_are_nonconvex() {
    let cfg = fin(30);
    let hz = cfg.horizon().unwrap();
    let rbar = DVector::from_element(4, cfg.rbar);
    let v = cfg.constraints().velocity_map;
    for n in 1..30 {
        let (e, _) = power_constraint_terms(&hz, &v, &rbar, n).unwrap();
        assert!(e.symmetric_eigenvalues().min() < 0.0, "stage {n}");
    }
    let (e0, _) = power_constraint_terms(&hz, &v, &rbar, 0).unwrap();
    assert!(e0.symmetric_eigenvalues().min() >= 0.0);
}

#[test]
fn static_exact_feasibility_implies_dynamic() {
    let cfg = fin(12);
    let hz = cfg.horizon().unwrap();
    let cons = cfg.constraints();
    let budget = cfg.budget().unwrap();
    let c1 = build_controller(PowerModel::DynamicAllocation, &hz, &cons, &budget).unwrap();
    let c2 = build_controller(PowerModel::StaticExact, &hz, &cons, &budget).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..2000 {
        let u = random_inputs(&mut rng, 48, 120.0);
        let y = c2.point(&hz, &u).unwrap();
        if c2.problem.max_violation(&y) <= 0.0 {
            checked += 1;
            assert!(c1.problem.max_violation(&y) <= 0.0);
        }
    }
    assert!(checked > 10, "only {checked} feasible samples");
}

#[test]
fn lossless_static_model_is_vacuous_at_rest() {
    let mut cfg = fin(6);
    cfg.rbar = 0.0;
    cfg.x0 = vec![0.0; 8];
    let hz = cfg.horizon().unwrap();
    let qp = build_controller(PowerModel::StaticExact, &hz, &cfg.constraints(), &cfg.budget().unwrap()).unwrap();
    // Torques far beyond P̄/v̄ held for one step leave every power row at zero.
    let mut u = DVector::zeros(24);
    u.rows_mut(20, 4).fill(170.0);
    let y = qp.point(&hz, &u).unwrap();
    for q in &qp.problem.quad_ineq {
        assert_eq!(q.value(&y), 0.0);
    }
}

#[test]
fn stage_qp_agrees_with_condensed_cost() {
    let hz = fin(25).horizon().unwrap();
    let cfg = fin(25);
    let qp = build_controller(PowerModel::StaticExact, &hz, &cfg.constraints(), &cfg.budget().unwrap()).unwrap();
    let m = HorizonMatrices::new(&hz).unwrap();
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..20 {
        let u = random_inputs(&mut rng, 100, 100.0);
        let y = qp.point(&hz, &u).unwrap();
        let j = m.cost(&u);
        assert!((qp.problem.objective(&y) - j).abs() <= 1e-9 * j);
    }
}

#[test]
fn short_horizon_fin_runs_keep_their_models() {
    let cfg = fin(60);
    let runs = run_fin_example(&cfg).unwrap();
    let labels: Vec<_> = runs.iter().map(|r| r.model.label()).collect();
    assert_eq!(labels, ["C1", "C2", "C3"]);
    for r in &runs {
        assert_eq!(r.plan.status, SolveStatus::Optimal);
        let v = r.model_violation(&cfg).unwrap();
        assert!(v <= 1e-7, "{}: {v:e}", r.model);
        assert_eq!(r.log.len(), 61);
        let j = r.log.scalar("J").unwrap();
        assert!(j.windows(2).all(|w| w[1] <= w[0]));
        assert!((j[0] - r.cost).abs() <= 1e-6 * r.cost);
        for (k, p) in r.log.power_total.iter().enumerate() {
            let sum: f64 = r.log.power_per_joint[k].iter().sum();
            assert_eq!(*p, sum);
            assert!(*p <= cfg.p_max + 1e-6);
        }
    }
    assert!(runs[0].cost <= runs[1].cost * (1.0 + 1e-6));
    assert!(runs[1].cost <= runs[2].cost * (1.0 + 1e-6));
}

#[test]
fn receding_mode_replans_each_sample() {
    let cfg = FinExample {
        steps: 20,
        mode: ExecutionMode::Receding,
        receding_steps: Some(6),
        ..FinExample::default()
    };
    let runs = run_fin_example(&cfg).unwrap();
    for r in &runs {
        assert_eq!(r.log.len(), 7);
        assert!(r.model_violation(&cfg).unwrap() <= 1e-7);
        // The first applied input is the first input of the first plan.
        assert!((&r.log.u_cmd[0] - r.plan.inputs.rows(0, 4)).amax() < 1e-12);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let cfg = FinExample {
        x0: vec![0.0; 3],
        ..FinExample::default()
    };
    assert!(cfg.horizon().is_err());
    let cfg = FinExample {
        steps: 0,
        ..FinExample::default()
    };
    assert!(cfg.horizon().is_err());
    let hz = fin(5).horizon().unwrap();
    assert!(power_constraint_terms(&hz, &DMatrix::zeros(3, 8), &DVector::zeros(4), 1).is_err());
}
