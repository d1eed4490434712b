//! Numerical kernel: convex QCQP interior-point solver, sequential
//! convexification for indefinite quadratic constraints, and small dense
//! helpers (eigenvalues, Lyapunov equations, scalar roots).

mod dense;
mod ipm;
pub mod ldl;
mod nonconvex;
mod scalar;
mod sparse;

pub use dense::{log_det_spd, max_eigenvalue, min_eigenvalue, psd_split, solve_lyapunov};
pub use ipm::{solve_qp, SolverOptions};
pub use nonconvex::{solve_qcqp_nonconvex, NonconvexOptions, NonconvexSolution};
pub use scalar::brent_root;
pub use sparse::SparseMatrix;

use crate::error::{Error, Result};
use nalgebra::DVector;

/// Quadratic inequality `yᵀ E y + χᵀ y ≤ c`. `E` is stored in full symmetric form.
#[derive(Debug, Clone)]
pub struct QuadConstraint {
    pub e: SparseMatrix,
    pub chi: Vec<(usize, f64)>,
    pub bound: f64,
}

impl QuadConstraint {
    pub fn new(e: SparseMatrix, chi: Vec<(usize, f64)>, bound: f64) -> Self {
        Self { e, chi, bound }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.e.quad_form(y) + self.chi.iter().map(|&(i, v)| v * y[i]).sum::<f64>()
    }

    /// Signed violation `value - bound`.
    pub fn residual(&self, y: &DVector<f64>) -> f64 {
        self.value(y) - self.bound
    }

    /// Indices touched by the gradient `2 E y + χ`.
    pub fn support(&self) -> Vec<usize> {
        let mut s = self.e.support();
        s.extend(self.chi.iter().map(|&(i, _)| i));
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Gradient restricted to `support` (same order).
    pub fn gradient_on(&self, y: &DVector<f64>, support: &[usize]) -> Vec<f64> {
        let mut g: Vec<f64> = support.iter().map(|&i| 2.0 * self.e.row_dot(i, y)).collect();
        for &(i, v) in &self.chi {
            let k = support.binary_search(&i).expect("chi index in support");
            g[k] += v;
        }
        g
    }

    /// Scale of the terms making up the constraint value at `y`.
    fn magnitude(&self, y: &DVector<f64>) -> f64 {
        let quad: f64 = self.e.iter().map(|(r, c, v)| (v * y[r] * y[c]).abs()).sum();
        let lin: f64 = self.chi.iter().map(|&(i, v)| (v * y[i]).abs()).sum();
        quad.max(lin).max(self.bound.abs())
    }
}

/// `min ½ yᵀHy + fᵀy + c₀` subject to equality, linear and quadratic inequality rows.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: SparseMatrix,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub eq_matrix: SparseMatrix,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: SparseMatrix,
    pub ineq_rhs: DVector<f64>,
    pub quad_ineq: Vec<QuadConstraint>,
}

impl QpProblem {
    pub fn new(hessian: SparseMatrix, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            constant: 0.0,
            eq_matrix: SparseMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: SparseMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            quad_ineq: Vec::new(),
        }
    }

    pub fn with_equalities(mut self, a: SparseMatrix, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, a: SparseMatrix, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn with_quadratic(mut self, q: Vec<QuadConstraint>) -> Self {
        self.quad_ineq = q;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let shape = |what: &str, m: &SparseMatrix, rows: usize| -> Result<()> {
            if m.ncols() != n || m.nrows() != rows {
                return Err(Error::Dimension(format!(
                    "{what} is {}x{}, expected {rows}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        shape("hessian", &self.hessian, n)?;
        shape("equality matrix", &self.eq_matrix, self.eq_rhs.len())?;
        shape("inequality matrix", &self.ineq_matrix, self.ineq_rhs.len())?;
        if !self.hessian.is_symmetric(1e-12) {
            return Err(Error::InvalidArgument("hessian is not symmetric".into()));
        }
        for (j, q) in self.quad_ineq.iter().enumerate() {
            shape("quadratic constraint matrix", &q.e, n)?;
            if q.chi.iter().any(|&(i, _)| i >= n) {
                return Err(Error::Dimension(format!("quadratic constraint {j}: χ index out of range")));
            }
            if !q.e.is_symmetric(1e-12) {
                return Err(Error::InvalidArgument(format!("quadratic constraint {j} is not symmetric")));
            }
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.linear) || !finite(&self.eq_rhs) || !finite(&self.ineq_rhs) {
            return Err(Error::InvalidArgument("non-finite problem data".into()));
        }
        Ok(())
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * self.hessian.quad_form(y) + self.linear.dot(y) + self.constant
    }

    /// Largest absolute constraint violation at `y` (0 when feasible).
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        let eq = (self.eq_matrix.mul_vec(y) - &self.eq_rhs).amax();
        let lin = (self.ineq_matrix.mul_vec(y) - &self.ineq_rhs)
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        let quad = self
            .quad_ineq
            .iter()
            .fold(0.0f64, |m, q| m.max(q.residual(y)));
        eq.max(lin).max(quad)
    }

    /// Largest constraint violation, each row relative to `1 + magnitude of its terms`.
    pub fn max_relative_violation(&self, y: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.eq_matrix.nrows() {
            let terms = self.eq_matrix.row(r).map(|(c, v)| (v * y[c]).abs()).sum::<f64>();
            let scale = 1.0 + terms.max(self.eq_rhs[r].abs());
            worst = worst.max((self.eq_matrix.row_dot(r, y) - self.eq_rhs[r]).abs() / scale);
        }
        for r in 0..self.ineq_matrix.nrows() {
            let terms = self.ineq_matrix.row(r).map(|(c, v)| (v * y[c]).abs()).sum::<f64>();
            let scale = 1.0 + terms.max(self.ineq_rhs[r].abs());
            worst = worst.max((self.ineq_matrix.row_dot(r, y) - self.ineq_rhs[r]).max(0.0) / scale);
        }
        for q in &self.quad_ineq {
            worst = worst.max(q.residual(y).max(0.0) / (1.0 + q.magnitude(y)));
        }
        worst
    }

    /// True when the hessian and every quadratic constraint are positive semidefinite.
    pub fn is_convex(&self, tol: f64) -> bool {
        let psd = |m: &SparseMatrix| {
            let s = m.support();
            if s.is_empty() {
                return true;
            }
            let sub = nalgebra::DMatrix::from_fn(s.len(), s.len(), |i, j| m.get(s[i], s[j]));
            min_eigenvalue(&sub).map_or(false, |l| l >= -tol * (1.0 + sub.amax()))
        };
        psd(&self.hessian) && self.quad_ineq.iter().all(|q| psd(&q.e))
    }
}

/// Lagrange multipliers, in the same order as the problem's constraint blocks.
#[derive(Debug, Clone)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub quad: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Relative KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    pub duals: Duals,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt: KktResiduals,
}

/// Relative KKT residuals.
///
/// Stationarity is the gradient of the Lagrangian over `1 +` the largest of
/// its term norms; primal feasibility is the worst row violation relative to
/// `1 +` the magnitude of that row's terms; dual feasibility is the most
/// negative inequality multiplier; complementarity is `max |λᵢ gᵢ(y)|` over
/// `1 + |objective| + |λ|·|g| scale`.
pub fn kkt_residuals(p: &QpProblem, y: &DVector<f64>, d: &Duals) -> KktResiduals {
    let hy = p.hessian.mul_vec(y);
    let at_nu = p.eq_matrix.tr_mul_vec(&d.eq);
    let at_lam = p.ineq_matrix.tr_mul_vec(&d.ineq);
    let mut quad_term = DVector::zeros(p.dim());
    for (q, &lam) in p.quad_ineq.iter().zip(d.quad.iter()) {
        if lam == 0.0 {
            continue;
        }
        let s = q.support();
        for (&i, g) in s.iter().zip(q.gradient_on(y, &s)) {
            quad_term[i] += lam * g;
        }
    }
    let grad = &hy + &p.linear + &at_nu + &at_lam + &quad_term;
    let scale = 1.0
        + hy.amax()
            .max(p.linear.amax())
            .max(at_nu.amax())
            .max(at_lam.amax())
            .max(quad_term.amax());
    let stationarity = grad.amax() / scale;

    let primal = p.max_relative_violation(y);

    let min_dual = d
        .ineq
        .iter()
        .chain(d.quad.iter())
        .fold(0.0f64, |m, v| m.min(*v));
    let dual = -min_dual;

    let obj = p.objective(y).abs();
    let mut comp = 0.0f64;
    let g_lin = p.ineq_matrix.mul_vec(y) - &p.ineq_rhs;
    for (g, lam) in g_lin.iter().zip(d.ineq.iter()) {
        comp = comp.max((lam * g).abs());
    }
    for (q, lam) in p.quad_ineq.iter().zip(d.quad.iter()) {
        comp = comp.max((lam * q.residual(y)).abs());
    }
    let complementarity = comp / (1.0 + obj + scale);

    KktResiduals {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}
