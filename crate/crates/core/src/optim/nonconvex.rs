//! Local solver for QCQPs with indefinite quadratic constraints.
//!
//! Each quadratic `yᵀEy + χᵀy ≤ c` is split as `E = E⁺ + E⁻` on its support.
//! The concave part is replaced by its tangent at the incumbent `ȳ`, which
//! over-estimates it, so every point feasible for the convex restriction is
//! feasible for the original constraint. Steps are limited by an ∞-norm
//! trust region and accepted only if exact re-evaluation confirms
//! feasibility and a non-increasing objective.

use super::{
    psd_split, solve_qp, QpProblem, QuadConstraint, SolveStatus, SolverOptions, SparseMatrix,
};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NonconvexOptions {
    pub trust_radius: f64,
    pub max_trust_radius: f64,
    pub max_outer: usize,
    /// Converged once an accepted step (∞-norm) or the trust radius drops below this.
    pub step_tol: f64,
    /// Relative violation allowed when accepting an iterate.
    pub feas_tol: f64,
    pub qp: SolverOptions,
}

impl Default for NonconvexOptions {
    fn default() -> Self {
        Self {
            trust_radius: 1.0,
            max_trust_radius: 1e6,
            max_outer: 100,
            step_tol: 1e-8,
            feas_tol: 1e-9,
            qp: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NonconvexSolution {
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    /// Objective after each accepted iterate, starting with the initial point.
    pub history: Vec<f64>,
}

enum Split {
    Convex,
    Indefinite {
        pos: SparseMatrix,
        neg: SparseMatrix,
    },
}

fn split_constraint(q: &QuadConstraint, n: usize) -> Split {
    let s = q.e.support();
    if s.is_empty() {
        return Split::Convex;
    }
    let sub = DMatrix::from_fn(s.len(), s.len(), |i, j| q.e.get(s[i], s[j]));
    let (pos, neg) = psd_split(&sub);
    let tol = 1e-12 * sub.amax();
    if neg.amax() <= tol {
        return Split::Convex;
    }
    let lift = |m: &DMatrix<f64>| {
        let mut trip = Vec::new();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if m[(i, j)].abs() > 1e-15 * sub.amax() {
                    trip.push((s[i], s[j], m[(i, j)]));
                }
            }
        }
        let m = SparseMatrix::from_triplets(n, n, &trip);
        // Exact symmetry for the convex solver.
        let sym: Vec<_> = m
            .iter()
            .map(|(r, c, v)| (r, c, 0.5 * (v + m.get(c, r))))
            .collect();
        SparseMatrix::from_triplets(n, n, &sym)
    };
    Split::Indefinite {
        pos: lift(&pos),
        neg: lift(&neg),
    }
}

/// Convex inner restriction of `q` about `ybar`.
fn convexify(q: &QuadConstraint, split: &Split, ybar: &DVector<f64>) -> QuadConstraint {
    match split {
        Split::Convex => q.clone(),
        Split::Indefinite { pos, neg } => {
            let mut chi: Vec<(usize, f64)> = q.chi.clone();
            for i in neg.support() {
                chi.push((i, 2.0 * neg.row_dot(i, ybar)));
            }
            chi.sort_by_key(|c| c.0);
            chi.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            QuadConstraint::new(pos.clone(), chi, q.bound + neg.quad_form(ybar))
        }
    }
}

fn trust_rows(n: usize, center: &DVector<f64>, radius: f64) -> (SparseMatrix, DVector<f64>) {
    let mut trip = Vec::with_capacity(2 * n);
    let mut rhs = DVector::zeros(2 * n);
    for i in 0..n {
        trip.push((2 * i, i, 1.0));
        rhs[2 * i] = center[i] + radius;
        trip.push((2 * i + 1, i, -1.0));
        rhs[2 * i + 1] = -(center[i] - radius);
    }
    (SparseMatrix::from_triplets(2 * n, n, &trip), rhs)
}

fn restricted(
    p: &QpProblem,
    splits: &[Split],
    ybar: &DVector<f64>,
    radius: Option<f64>,
) -> QpProblem {
    let mut sub = p.clone();
    sub.quad_ineq = p
        .quad_ineq
        .iter()
        .zip(splits)
        .map(|(q, s)| convexify(q, s, ybar))
        .collect();
    if let Some(r) = radius {
        let (a, b) = trust_rows(p.dim(), ybar, r);
        sub.ineq_matrix = SparseMatrix::vstack(&[&p.ineq_matrix, &a]);
        sub.ineq_rhs = DVector::from_iterator(
            p.ineq_rhs.len() + b.len(),
            p.ineq_rhs.iter().chain(b.iter()).copied(),
        );
    }
    sub
}

/// Drives the quadratic violations to zero by convexified feasibility
/// problems `min t s.t. restricted quadratics ≤ c + t·(1+|c|)`.
fn restore(
    p: &QpProblem,
    splits: &[Split],
    y0: &DVector<f64>,
    opts: &NonconvexOptions,
) -> Result<Option<DVector<f64>>> {
    let n = p.dim();
    let mut y = y0.clone();
    for _ in 0..opts.max_outer {
        if p.max_relative_violation(&y) <= opts.feas_tol {
            return Ok(Some(y));
        }
        let conv = restricted(p, splits, &y, None);
        let t = n;
        let embed = |m: &SparseMatrix, rows: usize| {
            let trip: Vec<_> = m.iter().collect();
            SparseMatrix::from_triplets(rows, n + 1, &trip)
        };
        let mut lin = DVector::zeros(n + 1);
        lin[t] = 1.0;
        let h: Vec<_> = (0..n).map(|i| (i, i, 1e-10)).collect();
        let mut ineq: Vec<_> = p.ineq_matrix.iter().collect();
        let ml = p.ineq_matrix.nrows();
        ineq.push((ml, t, -1.0));
        let mut rhs: Vec<f64> = p.ineq_rhs.iter().copied().collect();
        rhs.push(1e-3);
        let quad = conv
            .quad_ineq
            .iter()
            .map(|q| {
                let mut chi = q.chi.clone();
                chi.push((t, -(1.0 + q.bound.abs())));
                let trip: Vec<_> = q.e.iter().collect();
                QuadConstraint::new(SparseMatrix::from_triplets(n + 1, n + 1, &trip), chi, q.bound)
            })
            .collect();
        let prob = QpProblem::new(SparseMatrix::from_triplets(n + 1, n + 1, &h), lin)
            .with_equalities(embed(&p.eq_matrix, p.eq_matrix.nrows()), p.eq_rhs.clone())
            .with_inequalities(
                SparseMatrix::from_triplets(ml + 1, n + 1, &ineq),
                DVector::from_vec(rhs),
            )
            .with_quadratic(quad);
        let mut start = DVector::zeros(n + 1);
        start.rows_mut(0, n).copy_from(&y);
        start[t] = 1.0;
        let sol = solve_qp(&prob, &opts.qp, Some(&start))?;
        if sol.status == SolveStatus::Infeasible {
            return Ok(None);
        }
        let next = sol.y.rows(0, n).into_owned();
        let before = p.max_relative_violation(&y);
        let after = p.max_relative_violation(&next);
        y = next;
        if after <= opts.feas_tol {
            return Ok(Some(y));
        }
        if sol.y[t] > -1e-12 && after >= before * (1.0 - 1e-6) {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Local solution of a QCQP whose quadratic constraints may be indefinite.
///
/// `y0` must satisfy the linear constraints. If it violates a quadratic
/// constraint a restoration phase runs first; if that fails the status is
/// [`SolveStatus::Infeasible`] and `y0` is returned.
pub fn solve_qcqp_nonconvex(
    problem: &QpProblem,
    y0: &DVector<f64>,
    options: &NonconvexOptions,
) -> Result<NonconvexSolution> {
    problem.validate()?;
    let n = problem.dim();
    if y0.len() != n {
        return Err(Error::Dimension(format!("y0 has length {}, expected {n}", y0.len())));
    }
    if !(options.trust_radius > 0.0) {
        return Err(Error::InvalidArgument("trust radius must be positive".into()));
    }
    let splits: Vec<Split> = problem.quad_ineq.iter().map(|q| split_constraint(q, n)).collect();

    let Some(mut y) = restore(problem, &splits, y0, options)? else {
        return Ok(NonconvexSolution {
            objective: problem.objective(y0),
            y: y0.clone(),
            status: SolveStatus::Infeasible,
            outer_iterations: 0,
            history: Vec::new(),
        });
    };
    let mut obj = problem.objective(&y);
    let mut history = vec![obj];
    let mut radius = options.trust_radius;

    for outer in 0..options.max_outer {
        let sub = restricted(problem, &splits, &y, Some(radius));
        let sol = solve_qp(&sub, &options.qp, Some(&y))?;
        let candidate = sol.y;
        let cand_obj = problem.objective(&candidate);
        let feasible = sol.status != SolveStatus::Infeasible
            && problem.max_relative_violation(&candidate) <= options.feas_tol;
        let step = (&candidate - &y).amax();
        if feasible && cand_obj <= obj {
            y = candidate;
            let decrease = obj - cand_obj;
            obj = cand_obj;
            history.push(obj);
            let stationary = decrease <= 1e-14 * (1.0 + obj.abs());
            if step < options.step_tol || stationary {
                return Ok(NonconvexSolution {
                    y,
                    objective: obj,
                    status: SolveStatus::Optimal,
                    outer_iterations: outer + 1,
                    history,
                });
            }
            if step >= 0.5 * radius {
                radius = (radius * 1.5).min(options.max_trust_radius);
            }
        } else {
            radius *= 0.5;
            if radius < options.step_tol {
                return Ok(NonconvexSolution {
                    y,
                    objective: obj,
                    status: SolveStatus::Optimal,
                    outer_iterations: outer + 1,
                    history,
                });
            }
        }
    }
    Ok(NonconvexSolution {
        y,
        objective: obj,
        status: SolveStatus::MaxIter,
        outer_iterations: options.max_outer,
        history,
    })
}
