//! Primal-dual interior-point method (Mehrotra predictor-corrector) for
//! convex quadratically constrained quadratic programs.
//!
//! Inequalities `g(y) ≤ 0` get slacks `s > 0` and multipliers `λ > 0`; the
//! Newton system is reduced to the quasi-definite form
//! `[W + JᵀDJ, Aₑᵀ; Aₑ, 0]` with `D = diag(λ/s)` and factorized by the
//! envelope LDLᵀ, followed by iterative refinement against the unregularized
//! operator.

use super::ldl::EnvelopeLdl;
use super::{kkt_residuals, Duals, KktResiduals, QpProblem, QpSolution, QuadConstraint, SolveStatus};
use super::SparseMatrix;
use crate::error::{Error, Result};
use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Target for every relative KKT residual.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Classify failures with a phase-1 feasibility problem.
    pub phase1: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iter: 500,
            phase1: true,
        }
    }
}

const STATIC_REG: f64 = 1e-10;
const PIVOT_FLOOR: f64 = 1e-14;
const DYNAMIC_REG: f64 = 1e-8;
const STEP_FRACTION: f64 = 0.995;

struct Scaled {
    p: QpProblem,
    obj: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    quad: Vec<f64>,
}

fn row_scale(m: &SparseMatrix, r: usize) -> f64 {
    let a = m.row_max_abs(r);
    if a > 0.0 {
        1.0 / a
    } else {
        1.0
    }
}

fn scale_problem(p: &QpProblem) -> Scaled {
    let mut s = p.clone();
    let obj = 1.0 / p.hessian.max_abs().max(p.linear.amax()).max(1.0);
    s.hessian.scale(obj);
    s.linear *= obj;
    s.constant *= obj;
    let eq: Vec<f64> = (0..p.eq_matrix.nrows()).map(|r| row_scale(&p.eq_matrix, r)).collect();
    for (r, &f) in eq.iter().enumerate() {
        s.eq_matrix.scale_row(r, f);
        s.eq_rhs[r] *= f;
    }
    let ineq: Vec<f64> = (0..p.ineq_matrix.nrows()).map(|r| row_scale(&p.ineq_matrix, r)).collect();
    for (r, &f) in ineq.iter().enumerate() {
        s.ineq_matrix.scale_row(r, f);
        s.ineq_rhs[r] *= f;
    }
    let quad: Vec<f64> = p
        .quad_ineq
        .iter()
        .map(|q| {
            let a = q.e.max_abs().max(q.chi.iter().fold(0.0f64, |m, c| m.max(c.1.abs())));
            if a > 0.0 {
                1.0 / a
            } else {
                1.0
            }
        })
        .collect();
    for (q, &f) in s.quad_ineq.iter_mut().zip(&quad) {
        q.e.scale(f);
        q.chi.iter_mut().for_each(|c| c.1 *= f);
        q.bound *= f;
    }
    Scaled { p: s, obj, eq, ineq, quad }
}

struct Workspace<'a> {
    p: &'a QpProblem,
    n: usize,
    me: usize,
    ml: usize,
    supports: Vec<Vec<usize>>,
    factor: EnvelopeLdl,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let n = p.dim();
        let me = p.eq_matrix.nrows();
        let ml = p.ineq_matrix.nrows();
        let supports: Vec<Vec<usize>> = p.quad_ineq.iter().map(QuadConstraint::support).collect();

        let mut pattern: Vec<(usize, usize)> = Vec::new();
        pattern.extend(p.hessian.iter().filter(|e| e.0 > e.1).map(|e| (e.0, e.1)));
        for r in 0..ml {
            let cols = p.ineq_matrix.row_cols(r);
            for a in 0..cols.len() {
                for b in 0..a {
                    pattern.push((cols[a], cols[b]));
                }
            }
        }
        for s in &supports {
            for a in 0..s.len() {
                for b in 0..a {
                    pattern.push((s[a], s[b]));
                }
            }
        }
        pattern.extend(p.eq_matrix.iter().map(|(r, c, _)| (n + r, c)));
        pattern.sort_unstable();
        pattern.dedup();
        let signs: Vec<f64> = (0..n + me).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        let factor = EnvelopeLdl::new(n + me, &pattern, &signs);
        Self {
            p,
            n,
            me,
            ml,
            supports,
            factor,
        }
    }

    fn m(&self) -> usize {
        self.ml + self.p.quad_ineq.len()
    }

    fn constraints(&self, y: &DVector<f64>) -> DVector<f64> {
        let lin = self.p.ineq_matrix.mul_vec(y) - &self.p.ineq_rhs;
        let mut g = DVector::zeros(self.m());
        g.rows_mut(0, self.ml).copy_from(&lin);
        for (j, q) in self.p.quad_ineq.iter().enumerate() {
            g[self.ml + j] = q.residual(y);
        }
        g
    }

    fn quad_gradients(&self, y: &DVector<f64>) -> Vec<Vec<f64>> {
        self.p
            .quad_ineq
            .iter()
            .zip(&self.supports)
            .map(|(q, s)| q.gradient_on(y, s))
            .collect()
    }

    /// `J x` for the inequality Jacobian at the current gradients.
    fn jac_mul(&self, grads: &[Vec<f64>], x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for r in 0..self.ml {
            out[r] = self.p.ineq_matrix.row_dot(r, x);
        }
        for (j, (s, g)) in self.supports.iter().zip(grads).enumerate() {
            out[self.ml + j] = s.iter().zip(g).map(|(&i, gi)| gi * x[i]).sum();
        }
        out
    }

    fn jac_tr_mul(&self, grads: &[Vec<f64>], v: &DVector<f64>) -> DVector<f64> {
        let mut out = self.p.ineq_matrix.tr_mul_vec(&v.rows(0, self.ml).into_owned());
        for (j, (s, g)) in self.supports.iter().zip(grads).enumerate() {
            let vj = v[self.ml + j];
            for (&i, gi) in s.iter().zip(g) {
                out[i] += gi * vj;
            }
        }
        out
    }

    /// `W x` with `W = H + Σ 2 λⱼ Eⱼ`.
    fn lagrangian_hess_mul(&self, lam: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.p.hessian.mul_vec(x);
        for (j, q) in self.p.quad_ineq.iter().enumerate() {
            let l = lam[self.ml + j];
            if l != 0.0 {
                q.e.mul_vec_add(x, 2.0 * l, &mut out);
            }
        }
        out
    }

    fn assemble(&mut self, lam: &DVector<f64>, d: &DVector<f64>, grads: &[Vec<f64>]) {
        let n = self.n;
        let f = &mut self.factor;
        f.clear();
        for (r, c, v) in self.p.hessian.iter() {
            if r >= c {
                f.add(r, c, v);
            }
        }
        for (j, q) in self.p.quad_ineq.iter().enumerate() {
            let w = 2.0 * lam[self.ml + j];
            if w == 0.0 {
                continue;
            }
            for (r, c, v) in q.e.iter() {
                if r >= c {
                    f.add(r, c, w * v);
                }
            }
        }
        for r in 0..self.ml {
            let di = d[r];
            let cols = self.p.ineq_matrix.row_cols(r);
            let vals = self.p.ineq_matrix.row_values(r);
            for a in 0..cols.len() {
                let va = di * vals[a];
                for b in 0..=a {
                    f.add(cols[a], cols[b], va * vals[b]);
                }
            }
        }
        for (j, (s, g)) in self.supports.iter().zip(grads).enumerate() {
            let dj = d[self.ml + j];
            for a in 0..s.len() {
                let va = dj * g[a];
                for b in 0..=a {
                    f.add(s[a], s[b], va * g[b]);
                }
            }
        }
        for i in 0..n {
            f.add(i, i, STATIC_REG);
        }
        for (r, c, v) in self.p.eq_matrix.iter() {
            f.add(n + r, c, v);
        }
        for r in 0..self.me {
            f.add(n + r, n + r, -STATIC_REG);
        }
        f.factor(PIVOT_FLOOR, DYNAMIC_REG);
    }

    fn kkt_mul(
        &self,
        lam: &DVector<f64>,
        d: &DVector<f64>,
        grads: &[Vec<f64>],
        x: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.n;
        let xy = x.rows(0, n).into_owned();
        let xnu = x.rows(n, self.me).into_owned();
        let jx = self.jac_mul(grads, &xy).component_mul(d);
        let top = self.lagrangian_hess_mul(lam, &xy)
            + self.jac_tr_mul(grads, &jx)
            + self.p.eq_matrix.tr_mul_vec(&xnu);
        let bottom = self.p.eq_matrix.mul_vec(&xy);
        let mut out = DVector::zeros(n + self.me);
        out.rows_mut(0, n).copy_from(&top);
        out.rows_mut(n, self.me).copy_from(&bottom);
        out
    }

    fn solve_refined(
        &self,
        lam: &DVector<f64>,
        d: &DVector<f64>,
        grads: &[Vec<f64>],
        rhs: &DVector<f64>,
    ) -> DVector<f64> {
        let mut x = self.factor.solve(rhs);
        let mut res_norm = (rhs - self.kkt_mul(lam, d, grads, &x)).amax();
        for _ in 0..5 {
            let r = rhs - self.kkt_mul(lam, d, grads, &x);
            let candidate = &x + self.factor.solve(&r);
            let cand_norm = (rhs - self.kkt_mul(lam, d, grads, &candidate)).amax();
            if !(cand_norm < res_norm) {
                break;
            }
            x = candidate;
            let improved = cand_norm < 0.5 * res_norm;
            res_norm = cand_norm;
            if !improved || res_norm <= 1e-14 * (1.0 + rhs.amax()) {
                break;
            }
        }
        x
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0f64, |a, (x, d)| a.min(-x / d))
}

struct Iterate {
    y: DVector<f64>,
    nu: DVector<f64>,
    lam: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn unscale_duals(s: &Scaled, nu: &DVector<f64>, lam: &DVector<f64>) -> Duals {
    let ml = s.ineq.len();
    Duals {
        eq: DVector::from_fn(s.eq.len(), |i, _| nu[i] * s.eq[i] / s.obj),
        ineq: DVector::from_fn(ml, |i, _| lam[i] * s.ineq[i] / s.obj),
        quad: DVector::from_fn(s.quad.len(), |j, _| lam[ml + j] * s.quad[j] / s.obj),
    }
}

fn run_ipm(original: &QpProblem, s: &Scaled, y0: DVector<f64>, opts: &SolverOptions) -> Iterate {
    let mut ws = Workspace::new(&s.p);
    let (n, me) = (ws.n, ws.me);
    let m = ws.m();

    let mut y = y0;
    let mut nu = DVector::zeros(me);
    let g0 = ws.constraints(&y);
    let mut sl = g0.map(|g| (-g).max(1.0));
    let mut lam = DVector::from_element(m, 1.0);

    let mut stalls = 0;
    for it in 0..opts.max_iter {
        let duals = unscale_duals(s, &nu, &lam);
        let kkt = kkt_residuals(original, &y, &duals);
        if kkt.max() <= opts.tolerance {
            return Iterate { y, nu, lam, iterations: it, converged: true };
        }

        let g = ws.constraints(&y);
        let grads = ws.quad_gradients(&y);
        let r_d = s.p.hessian.mul_vec(&y)
            + &s.p.linear
            + s.p.eq_matrix.tr_mul_vec(&nu)
            + ws.jac_tr_mul(&grads, &lam);
        let r_e = s.p.eq_matrix.mul_vec(&y) - &s.p.eq_rhs;
        let r_i = &g + &sl;
        let mu = if m > 0 { sl.dot(&lam) / m as f64 } else { 0.0 };
        let d = lam.component_div(&sl);

        ws.assemble(&lam, &d, &grads);

        let direction = |r_c: &DVector<f64>| {
            let w = DVector::from_fn(m, |i, _| (lam[i] * r_i[i] - r_c[i]) / sl[i]);
            let top = -&r_d - ws.jac_tr_mul(&grads, &w);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&top);
            rhs.rows_mut(n, me).copy_from(&(-&r_e));
            let sol = ws.solve_refined(&lam, &d, &grads, &rhs);
            let dy = sol.rows(0, n).into_owned();
            let dnu = sol.rows(n, me).into_owned();
            let jdy = ws.jac_mul(&grads, &dy);
            let dlam = DVector::from_fn(m, |i, _| d[i] * (jdy[i] + r_i[i]) - r_c[i] / sl[i]);
            let ds = DVector::from_fn(m, |i, _| -(r_c[i] + sl[i] * dlam[i]) / lam[i]);
            (dy, dnu, dlam, ds)
        };

        let rc_aff = sl.component_mul(&lam);
        let (mut dy, mut dnu, mut dlam, mut ds) = direction(&rc_aff);
        if m > 0 {
            let a_aff = max_step(&sl, &ds).min(max_step(&lam, &dlam));
            let mu_aff = (&sl + &ds * a_aff).dot(&(&lam + &dlam * a_aff)) / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let rc = &rc_aff + ds.component_mul(&dlam) - DVector::from_element(m, sigma * mu);
            (dy, dnu, dlam, ds) = direction(&rc);
        }
        let alpha = if m > 0 {
            (STEP_FRACTION * max_step(&sl, &ds).min(max_step(&lam, &dlam))).min(1.0)
        } else {
            1.0
        };
        if !(dy.iter().chain(dlam.iter()).all(|v| v.is_finite())) {
            break;
        }
        y += &dy * alpha;
        nu += &dnu * alpha;
        lam += &dlam * alpha;
        sl += &ds * alpha;

        stalls = if alpha < 1e-8 { stalls + 1 } else { 0 };
        if stalls >= 10 || lam.amax() > 1e12 {
            return Iterate { y, nu, lam, iterations: it + 1, converged: false };
        }
    }
    let duals = unscale_duals(s, &nu, &lam);
    let converged = kkt_residuals(original, &y, &duals).max() <= opts.tolerance;
    Iterate { y, nu, lam, iterations: opts.max_iter, converged }
}

fn embed(m: &SparseMatrix, rows: usize, cols: usize, extra: &[(usize, usize, f64)]) -> SparseMatrix {
    let mut trip: Vec<(usize, usize, f64)> = m.iter().collect();
    trip.extend_from_slice(extra);
    SparseMatrix::from_triplets(rows, cols, &trip)
}

/// Minimizes the largest inequality violation `t` subject to the equalities.
/// Returns the optimal `t` in scaled units, or infinity when even that fails.
fn phase_one(s: &Scaled, y0: &DVector<f64>) -> f64 {
    let n = s.p.dim();
    let t = n;
    let ml = s.p.ineq_matrix.nrows();
    let h: Vec<_> = (0..n).map(|i| (i, i, 1e-8)).collect();
    let mut lin = DVector::zeros(n + 1);
    lin[t] = 1.0;

    let mut extra: Vec<_> = (0..ml).map(|r| (r, t, -1.0)).collect();
    extra.push((ml, t, -1.0));
    let a = embed(&s.p.ineq_matrix, ml + 1, n + 1, &extra);
    let mut b: Vec<f64> = s.p.ineq_rhs.iter().copied().collect();
    b.push(1.0);
    let quad = s
        .p
        .quad_ineq
        .iter()
        .map(|q| {
            let mut chi = q.chi.clone();
            chi.push((t, -1.0));
            QuadConstraint::new(embed(&q.e, n + 1, n + 1, &[]), chi, q.bound)
        })
        .collect();
    let prob = QpProblem::new(SparseMatrix::from_triplets(n + 1, n + 1, &h), lin)
        .with_equalities(embed(&s.p.eq_matrix, s.p.eq_matrix.nrows(), n + 1, &[]), s.p.eq_rhs.clone())
        .with_inequalities(a, DVector::from_vec(b))
        .with_quadratic(quad);
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(y0);
    start[t] = s.p.max_violation(y0) + 1.0;
    let sub = scale_problem(&prob);
    let opts = SolverOptions {
        tolerance: 1e-9,
        max_iter: 300,
        phase1: false,
    };
    let res = run_ipm(&prob, &sub, start, &opts);
    if res.converged {
        res.y[t].max(0.0)
    } else {
        f64::INFINITY
    }
}

/// Solves a convex QCQP. Non-convex input is rejected; use
/// [`super::solve_qcqp_nonconvex`] for indefinite quadratic constraints.
pub fn solve_qp(
    problem: &QpProblem,
    options: &SolverOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(Error::Dimension(format!("warm start has length {}, expected {n}", w.len())));
        }
    }
    let scaled = scale_problem(problem);
    let y0 = warm_start.cloned().unwrap_or_else(|| DVector::zeros(n));
    let it = run_ipm(problem, &scaled, y0.clone(), options);
    let duals = unscale_duals(&scaled, &it.nu, &it.lam);
    let kkt: KktResiduals = kkt_residuals(problem, &it.y, &duals);
    let status = if it.converged {
        SolveStatus::Optimal
    } else if options.phase1 {
        let v = phase_one(&scaled, &y0);
        if v > 1e-7 {
            SolveStatus::Infeasible
        } else {
            SolveStatus::MaxIter
        }
    } else {
        SolveStatus::MaxIter
    };
    Ok(QpSolution {
        objective: problem.objective(&it.y),
        y: it.y,
        duals,
        status,
        iterations: it.iterations,
        kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn unconstrained_least_squares() {
        let a = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let p = QpProblem::new(SparseMatrix::identity(3) , -&a);
        let s = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((&s.y - &a).amax() < 1e-9);
    }

    #[test]
    fn one_dimensional_box() {
        // min (y - 2)^2 s.t. y <= 1
        let p = QpProblem::new(
            SparseMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]),
            DVector::from_vec(vec![-4.0]),
        )
        .with_inequalities(
            SparseMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            DVector::from_vec(vec![1.0]),
        );
        let s = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.y[0] - 1.0).abs() < 1e-8);
        assert!((s.duals.ineq[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn equality_constrained() {
        // min y0² + y1² s.t. y0 + y1 = 1
        let p = QpProblem::new(SparseMatrix::identity(2), DVector::zeros(2)).with_equalities(
            SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]),
            DVector::from_vec(vec![1.0]),
        );
        let s = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.y[0] - 0.5).abs() < 1e-9 && (s.y[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn disc_constraint() {
        // min -y0 - y1 s.t. y0² + y1² <= 1
        let p = QpProblem::new(SparseMatrix::zeros(2, 2), DVector::from_vec(vec![-1.0, -1.0]))
            .with_quadratic(vec![QuadConstraint::new(SparseMatrix::identity(2), vec![], 1.0)]);
        let s = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let r = 0.5f64.sqrt();
        assert!((s.y[0] - r).abs() < 1e-7 && (s.y[1] - r).abs() < 1e-7);
        assert!(s.kkt.max() <= 1e-7);
    }

    #[test]
    fn detects_infeasibility() {
        // y <= -1 and -y <= -1
        let p = QpProblem::new(SparseMatrix::identity(1), DVector::zeros(1)).with_inequalities(
            SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 1, &[1.0, -1.0])),
            DVector::from_vec(vec![-1.0, -1.0]),
        );
        let s = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn deterministic() {
        let p = QpProblem::new(SparseMatrix::identity(2), DVector::from_vec(vec![1.0, -3.0]))
            .with_quadratic(vec![QuadConstraint::new(
                SparseMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 1.0)]),
                vec![(0, 0.3)],
                0.5,
            )]);
        let a = solve_qp(&p, &opts(), None).unwrap();
        let b = solve_qp(&p, &opts(), None).unwrap();
        assert_eq!(a.y, b.y);
    }
}
