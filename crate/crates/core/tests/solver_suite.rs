mod common;

use common::qp_oracle::{random_indefinite, Instance};
use nalgebra::DVector;
use powersat::optim::{
    solve_qcqp_nonconvex, solve_qp, NonconvexOptions, SolveStatus, SolverOptions,
};
use proptest::prelude::*;

#[test]
fn convex_instances_match_projected_gradient() {
    for seed in 0..40 {
        let inst = Instance::random(seed);
        let p = inst.to_problem();
        let sol = solve_qp(&p, &SolverOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        assert!(sol.kkt.max() <= 1e-7, "seed {seed}: {:?}", sol.kkt);
        let (_, oracle) = inst.oracle();
        let gap = (sol.objective - oracle).abs() / (1.0 + oracle.abs());
        assert!(gap <= 1e-6, "seed {seed}: ipm {} oracle {oracle}", sol.objective);
    }
}

#[test]
fn indefinite_instances_end_feasible() {
    for seed in 0..30 {
        let p = random_indefinite(seed);
        let y0 = DVector::zeros(p.dim());
        let sol = solve_qcqp_nonconvex(&p, &y0, &NonconvexOptions::default()).unwrap();
        assert_ne!(sol.status, SolveStatus::Infeasible, "seed {seed}");
        assert!(p.max_violation(&sol.y) <= 1e-7, "seed {seed}");
        assert!(sol.objective <= p.objective(&y0) + 1e-12);
        assert!(sol.history.windows(2).all(|w| w[1] <= w[0]), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn duals_nonnegative_and_complementary(seed in 1000u64..100_000) {
        let p = Instance::random(seed).to_problem();
        let sol = solve_qp(&p, &SolverOptions::default(), None).unwrap();
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        prop_assert!(sol.duals.ineq.iter().chain(sol.duals.quad.iter()).all(|&l| l >= 0.0));
        prop_assert!(sol.kkt.complementarity <= 1e-7);
    }
}
