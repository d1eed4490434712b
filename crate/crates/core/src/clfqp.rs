//! Joint-space feedback linearization, quadratic control Lyapunov functions
//! and the relaxed CLF-QP with dynamic or static power allocation.
//!
//! The task output is `y = q`. The error state is `e = (ỹ, ỹ̇)` with
//! `ỹ = q − q*(t)`, so `ė = A e + B ũ` is a double integrator once the
//! decoupling matrix `M(q)⁻¹` has been inverted.

use crate::error::{Error, Result};
use crate::model::{LagrangianModel, PowerBudget, State, TwoLinkArm, TwoLinkParams};
use crate::optim::{
    kkt_residuals, max_eigenvalue, min_eigenvalue, solve_lyapunov, solve_qp, QpProblem, QuadConstraint, SolveStatus,
    SolverOptions, SparseMatrix,
};
use crate::powerlim::{motor_power, PsatMode};
use crate::sim::{settling_time, simulate, Actuation, Controller, Limiter, TrajectoryLog};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Desired output and its first two derivatives at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub y: DVector<f64>,
    pub ydot: DVector<f64>,
    pub yddot: DVector<f64>,
}

impl Reference {
    pub fn setpoint(y: DVector<f64>) -> Self {
        let n = y.len();
        Self {
            y,
            ydot: DVector::zeros(n),
            yddot: DVector::zeros(n),
        }
    }
}

/// Stacked output error `(ỹ, ỹ̇)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskError {
    pub e: DVector<f64>,
    pub t: f64,
}

impl TaskError {
    pub fn new(x: &State, reference: &Reference, t: f64) -> Result<Self> {
        let n = x.dof();
        if reference.y.len() != n || reference.ydot.len() != n || reference.yddot.len() != n {
            return Err(Error::Dimension(format!("reference for {} outputs, state has {n}", reference.y.len())));
        }
        let mut e = DVector::zeros(2 * n);
        e.rows_mut(0, n).copy_from(&(&x.q - &reference.y));
        e.rows_mut(n, n).copy_from(&(&x.qdot - &reference.ydot));
        Ok(Self { e, t })
    }

    pub fn outputs(&self) -> usize {
        self.e.len() / 2
    }
}

/// `C q̇ + D q̇ + G`, the drift torque cancelled by feedback linearization.
fn bias_torque(model: &dyn LagrangianModel, x: &State) -> DVector<f64> {
    model.coriolis(&x.q, &x.qdot) * &x.qdot + model.damping() * &x.qdot + model.gravity(&x.q)
}

fn mass_inverse(model: &dyn LagrangianModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model
        .mass(q)
        .try_inverse()
        .ok_or_else(|| Error::Singular("decoupling matrix M(q)⁻¹ is not invertible".into()))
}

/// `u = (L_gL_f y)⁻¹(ũ + ÿ* − L_f²y)`, which for `y = q` reads
/// `u = M(q)(ũ + q̈*) + C q̇ + D q̇ + G`.
pub fn feedback_linearize(
    model: &dyn LagrangianModel,
    x: &State,
    reference: &Reference,
    aux: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.dof();
    if x.dof() != n || aux.len() != n || reference.yddot.len() != n {
        return Err(Error::Dimension("feedback linearization operands".into()));
    }
    let decoupling = mass_inverse(model, &x.q)?;
    let lf2 = -(&decoupling * bias_torque(model, x));
    let m = decoupling
        .try_inverse()
        .ok_or_else(|| Error::Singular("decoupling matrix is singular".into()))?;
    Ok(m * (aux + &reference.yddot - lf2))
}

/// `ũ = −K_p ỹ − K_d ỹ̇`.
pub fn pd_auxiliary(kp: &DMatrix<f64>, kd: &DMatrix<f64>, err: &TaskError) -> DVector<f64> {
    let n = err.outputs();
    -(kp * err.e.rows(0, n)) - kd * err.e.rows(n, n)
}

/// `A_cl = [0 I; −K_p −K_d]`.
pub fn closed_loop_matrix(kp: &DMatrix<f64>, kd: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = kp.nrows();
    if kp.shape() != (n, n) || kd.shape() != (n, n) {
        return Err(Error::Dimension("K_p and K_d must be square and equal".into()));
    }
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (n, n)).copy_from(&(-kp));
    a.view_mut((n, n), (n, n)).copy_from(&(-kd));
    Ok(a)
}

/// Quadratic CLF `V = eᵀPe` with `A_clᵀP + PA_cl + W = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clf {
    pub p: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    /// Guaranteed decay rate `λ_min(W)/λ_max(P)`.
    pub epsilon: f64,
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax()) && m.clone().cholesky().is_some()
}

fn check_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let p = solve_lyapunov(a, &DMatrix::identity(n, n))
        .map_err(|_| Error::InvalidArgument("closed-loop matrix is not Hurwitz".into()))?;
    if !is_positive_definite(&((&p + p.transpose()) * 0.5)) {
        return Err(Error::InvalidArgument("closed-loop matrix is not Hurwitz".into()));
    }
    Ok(())
}

impl Clf {
    fn assemble(a_cl: DMatrix<f64>, p: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if !is_positive_definite(&p) {
            return Err(Error::InvalidArgument("P must be symmetric positive definite".into()));
        }
        if !is_positive_definite(&w) {
            return Err(Error::InvalidArgument("W must be symmetric positive definite".into()));
        }
        let epsilon = min_eigenvalue(&w)? / max_eigenvalue(&p)?;
        Ok(Self { p, w, a_cl, epsilon })
    }

    /// Keeps a given `P` and takes `W = −(A_clᵀP + PA_cl)` as the decrease target.
    pub fn from_p(kp: &DMatrix<f64>, kd: &DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let a_cl = closed_loop_matrix(kp, kd)?;
        if p.shape() != a_cl.shape() {
            return Err(Error::Dimension(format!("P is {:?}, A_cl is {:?}", p.shape(), a_cl.shape())));
        }
        let w = -(a_cl.transpose() * &p + &p * &a_cl);
        Self::assemble(a_cl, p, w)
    }

    pub fn value(&self, e: &DVector<f64>) -> f64 {
        e.dot(&(&self.p * e))
    }

    /// `max |A_clᵀP + PA_cl + W|`.
    pub fn lyapunov_residual(&self) -> f64 {
        (self.a_cl.transpose() * &self.p + &self.p * &self.a_cl + &self.w).amax()
    }
}

/// Solves the Lyapunov equation for `P` given gains and `W`.
pub fn build_clf(kp: &DMatrix<f64>, kd: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Clf> {
    let a_cl = closed_loop_matrix(kp, kd)?;
    check_hurwitz(&a_cl)?;
    let p = solve_lyapunov(&a_cl, w)?;
    let p = (&p + p.transpose()) * 0.5;
    Clf::assemble(a_cl, p, w.clone())
}

/// `P ⊗ I_n` for a per-output `2 × 2` block acting on `(ỹᵢ, ỹ̇ᵢ)`.
pub fn per_output_block(block: &DMatrix<f64>, outputs: usize) -> Result<DMatrix<f64>> {
    if block.shape() != (2, 2) {
        return Err(Error::Dimension("per-output block must be 2 × 2".into()));
    }
    Ok(block.kronecker(&DMatrix::identity(outputs, outputs)))
}

/// `[2ζω_n², 2ω_n√(1−ζ²); 2ω_n√(1−ζ²), 2ζ]`.
pub fn damped_block(omega_n: f64, zeta: f64) -> Result<DMatrix<f64>> {
    if !(omega_n > 0.0) || !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidArgument(format!("need ω_n > 0 and 0 < ζ < 1, got {omega_n}, {zeta}")));
    }
    let off = 2.0 * omega_n * (1.0 - zeta * zeta).sqrt();
    Ok(DMatrix::from_row_slice(2, 2, &[2.0 * zeta * omega_n * omega_n, off, off, 2.0 * zeta]))
}

/// Linear CLF-decrease row `a·u ≤ b` (before relaxation) at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfRow {
    pub a: DVector<f64>,
    pub b: f64,
    /// `L_f̃V`, the input-free part of `V̇`.
    pub drift: f64,
    pub v: f64,
    /// `eᵀWe`.
    pub target: f64,
}

impl ClfRow {
    /// `V̇` under input `u`.
    pub fn rate(&self, u: &DVector<f64>) -> f64 {
        self.drift + self.a.dot(u)
    }

    /// `max(0, a·u − b)`: the slack needed by `u`.
    pub fn slack_needed(&self, u: &DVector<f64>) -> f64 {
        (self.a.dot(u) - self.b).max(0.0)
    }
}

/// `L_f̃V + L_g̃V·u ≤ −eᵀWe` with `f̃ = [ỹ̇; L_f²y − ÿ*]` and `g̃ = [0; M⁻¹]`.
pub fn clf_row(model: &dyn LagrangianModel, x: &State, t: f64, clf: &Clf, reference: &Reference) -> Result<ClfRow> {
    let n = model.dof();
    let err = TaskError::new(x, reference, t)?;
    if clf.p.nrows() != 2 * n {
        return Err(Error::Dimension(format!("CLF of size {} for {n} outputs", clf.p.nrows())));
    }
    let minv = mass_inverse(model, &x.q)?;
    let pe = &clf.p * &err.e;
    let pe_vel = pe.rows(n, n).into_owned();
    let mut ftilde = DVector::zeros(2 * n);
    ftilde.rows_mut(0, n).copy_from(&err.e.rows(n, n));
    ftilde
        .rows_mut(n, n)
        .copy_from(&(-(&minv * bias_torque(model, x)) - &reference.yddot));
    let drift = 2.0 * pe.dot(&ftilde);
    let a = minv.transpose() * pe_vel * 2.0;
    let target = err.e.dot(&(&clf.w * &err.e));
    Ok(ClfRow {
        a,
        b: -target - drift,
        drift,
        v: err.e.dot(&pe),
        target,
    })
}

/// Controller family compared on the two-link arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClfVariant {
    /// Relaxed CLF-QP with the aggregate power limit.
    #[serde(rename = "C1")]
    RelaxedDynamic,
    /// Relaxed CLF-QP with a fixed per-joint split.
    #[serde(rename = "C2")]
    RelaxedStatic,
    /// Unconstrained feedback linearization, limited by the plant.
    #[serde(rename = "C3")]
    FeedbackLinearization,
}

impl ClfVariant {
    pub const ALL: [ClfVariant; 3] = [
        ClfVariant::RelaxedDynamic,
        ClfVariant::RelaxedStatic,
        ClfVariant::FeedbackLinearization,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ClfVariant::RelaxedDynamic => "C1",
            ClfVariant::RelaxedStatic => "C2",
            ClfVariant::FeedbackLinearization => "C3",
        }
    }

    fn uses_qp(&self) -> bool {
        !matches!(self, ClfVariant::FeedbackLinearization)
    }
}

impl fmt::Display for ClfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ClfVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" | "dynamic" => Ok(ClfVariant::RelaxedDynamic),
            "C2" | "c2" | "static" => Ok(ClfVariant::RelaxedStatic),
            "C3" | "c3" | "feedback-linearization" => Ok(ClfVariant::FeedbackLinearization),
            other => Err(Error::InvalidArgument(format!("unknown controller variant {other:?}"))),
        }
    }
}

/// Weights, bounds and gains shared by all variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfQpParams {
    pub kp: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    /// Baseline torque `u₀`.
    pub u0: DVector<f64>,
    /// Diagonal of `Φ`.
    pub phi: DVector<f64>,
    pub slack_weight: f64,
    /// Symmetric torque bound `ū`.
    pub torque_limit: DVector<f64>,
    /// Per-joint split, resistance and aggregate limit.
    pub budget: PowerBudget,
}

impl ClfQpParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        let dims = [self.u0.len(), self.phi.len(), self.torque_limit.len(), self.budget.len()];
        if self.kp.shape() != (n, n) || self.kd.shape() != (n, n) || dims.iter().any(|d| *d != n) {
            return Err(Error::Dimension(format!("CLF-QP parameters for {n} joints")));
        }
        if self.torque_limit.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Infeasible("torque bounds must be nonnegative".into()));
        }
        if self.phi.iter().any(|v| !(*v > 0.0)) || !(self.slack_weight > 0.0) {
            return Err(Error::InvalidArgument("Φ and c_s must be positive".into()));
        }
        self.budget.validate()
    }

    /// Bounds scaled by `1 − margin`.
    pub fn tightened(&self, margin: f64) -> Self {
        let f = 1.0 - margin;
        let mut out = self.clone();
        out.torque_limit *= f;
        out.budget.per_joint_limit *= f;
        out.budget.aggregate_limit *= f;
        out
    }
}

/// Relative tightening of torque and power bounds inside the QP, so that
/// solver tolerance cannot surface as a violation of the true limits.
pub const SOLVE_MARGIN: f64 = 1e-8;

/// One control decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfStep {
    pub u: DVector<f64>,
    pub slack: f64,
    pub row: ClfRow,
    /// Largest relative KKT residual of the QP (0 without a QP).
    pub kkt: f64,
    pub iterations: usize,
}

/// Relaxed CLF-QP over `(u, p_s)`:
/// `min (u−u₀)ᵀΦ(u−u₀) + c_s p_s²` s.t. the CLF row with slack, `|u| ≤ ū`
/// and the variant's power constraints.
pub fn clfqp_problem(variant: ClfVariant, row: &ClfRow, qdot: &DVector<f64>, params: &ClfQpParams) -> Result<QpProblem> {
    if !variant.uses_qp() {
        return Err(Error::InvalidArgument("feedback linearization has no QP".into()));
    }
    let n = params.phi.len();
    let s = n;
    let mut h = Vec::with_capacity(n + 1);
    let mut f = DVector::zeros(n + 1);
    for i in 0..n {
        h.push((i, i, 2.0 * params.phi[i]));
        f[i] = -2.0 * params.phi[i] * params.u0[i];
    }
    h.push((s, s, 2.0 * params.slack_weight));
    let mut prob = QpProblem::new(SparseMatrix::from_triplets(n + 1, n + 1, &h), f);
    prob.constant = (0..n).map(|i| params.phi[i] * params.u0[i] * params.u0[i]).sum();

    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        rows.push((rhs.len(), i, row.a[i]));
    }
    rows.push((rhs.len(), s, -1.0));
    rhs.push(row.b);
    for i in 0..n {
        rows.push((rhs.len(), i, 1.0));
        rhs.push(params.torque_limit[i]);
        rows.push((rhs.len(), i, -1.0));
        rhs.push(params.torque_limit[i]);
    }
    let a = SparseMatrix::from_triplets(rhs.len(), n + 1, &rows);
    prob = prob.with_inequalities(a, DVector::from_vec(rhs));

    let rbar = &params.budget.normalized_resistance;
    let quad = match variant {
        ClfVariant::RelaxedDynamic => {
            let e: Vec<_> = (0..n).map(|i| (i, i, rbar[i])).collect();
            vec![QuadConstraint::new(
                SparseMatrix::from_triplets(n + 1, n + 1, &e),
                (0..n).map(|i| (i, qdot[i])).collect(),
                params.budget.aggregate_limit,
            )]
        }
        ClfVariant::RelaxedStatic => (0..n)
            .map(|i| {
                QuadConstraint::new(
                    SparseMatrix::from_triplets(n + 1, n + 1, &[(i, i, rbar[i])]),
                    vec![(i, qdot[i])],
                    params.budget.per_joint_limit[i],
                )
            })
            .collect(),
        ClfVariant::FeedbackLinearization => unreachable!(),
    };
    Ok(prob.with_quadratic(quad))
}

pub fn clf_solver_options() -> SolverOptions {
    SolverOptions {
        tolerance: 1e-10,
        max_iter: 200,
        phase1: false,
    }
}

/// Substitutes `y = diag(scale)·ŷ`.
fn scale_columns(p: &QpProblem, scale: &DVector<f64>) -> QpProblem {
    let cols = |m: &SparseMatrix| {
        let t: Vec<_> = m.iter().map(|(r, c, v)| (r, c, v * scale[c])).collect();
        SparseMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    };
    let both = |m: &SparseMatrix| {
        let t: Vec<_> = m.iter().map(|(r, c, v)| (r, c, v * scale[r] * scale[c])).collect();
        SparseMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    };
    let mut out = QpProblem::new(both(&p.hessian), p.linear.component_mul(scale))
        .with_equalities(cols(&p.eq_matrix), p.eq_rhs.clone())
        .with_inequalities(cols(&p.ineq_matrix), p.ineq_rhs.clone())
        .with_quadratic(
            p.quad_ineq
                .iter()
                .map(|q| QuadConstraint::new(both(&q.e), q.chi.iter().map(|&(i, v)| (i, v * scale[i])).collect(), q.bound))
                .collect(),
        );
    out.constant = p.constant;
    out
}

/// One control decision of `variant` at `(x, t)`.
pub fn clfqp_solve(
    variant: ClfVariant,
    model: &dyn LagrangianModel,
    x: &State,
    t: f64,
    clf: &Clf,
    reference: &Reference,
    params: &ClfQpParams,
) -> Result<ClfStep> {
    params.validate(model.dof())?;
    let row = clf_row(model, x, t, clf, reference)?;
    if !variant.uses_qp() {
        let err = TaskError::new(x, reference, t)?;
        let aux = pd_auxiliary(&params.kp, &params.kd, &err);
        let u = feedback_linearize(model, x, reference, &aux)?;
        return Ok(ClfStep {
            slack: row.slack_needed(&u),
            u,
            row,
            kkt: 0.0,
            iterations: 0,
        });
    }
    let prob = clfqp_problem(variant, &row, &x.qdot, &params.tightened(SOLVE_MARGIN))?;
    // The slack is orders of magnitude larger than the torques, so solve in
    // `ŷ = S⁻¹y` with `S = diag(ū, σ)`. Constraint values are unchanged by the
    // substitution, hence so are the multipliers.
    let n = model.dof();
    let need = (row.a.dot(&params.u0) - row.b).max(0.0);
    let sigma = need.max(1.0);
    let scale = DVector::from_fn(n + 1, |i, _| if i < n { params.torque_limit[i].max(1.0) } else { sigma });
    let scaled = scale_columns(&prob, &scale);
    // Strictly feasible start: `u = u₀` with more slack than the row needs there.
    let mut start = DVector::zeros(n + 1);
    for i in 0..n {
        start[i] = params.u0[i] / scale[i];
    }
    start[n] = (1.01 * need + 1.0) / sigma;
    let mut sol = solve_qp(&scaled, &clf_solver_options(), Some(&start))?;
    sol.y.component_mul_assign(&scale);
    sol.kkt = kkt_residuals(&prob, &sol.y, &sol.duals);
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(Error::Infeasible(format!("{variant} QP at t = {t}"))),
        SolveStatus::MaxIter => {
            eprintln!("DBG {variant} t={t} qd={:?} a={:?} b={} y={:?} it={}", x.qdot.as_slice(), row.a.as_slice(), row.b, sol.y.as_slice(), sol.iterations);
            return Err(Error::NoConvergence {
                iterations: sol.iterations,
                residual: sol.kkt.max(),
            })
        }
    }
    Ok(ClfStep {
        u: sol.y.rows(0, n).into_owned(),
        slack: sol.y[n],
        row,
        kkt: sol.kkt.max(),
        iterations: sol.iterations,
    })
}

/// Runs one variant each tick and reports `V`, `p_s` and the KKT residual.
pub struct ClfController<'a> {
    pub variant: ClfVariant,
    model: &'a dyn LagrangianModel,
    clf: &'a Clf,
    params: &'a ClfQpParams,
    reference: Reference,
    last: Option<ClfStep>,
}

impl<'a> ClfController<'a> {
    pub fn new(
        variant: ClfVariant,
        model: &'a dyn LagrangianModel,
        clf: &'a Clf,
        params: &'a ClfQpParams,
        reference: Reference,
    ) -> Self {
        Self {
            variant,
            model,
            clf,
            params,
            reference,
            last: None,
        }
    }
}

impl Controller for ClfController<'_> {
    fn command(&mut self, t: f64, state: &State) -> Result<DVector<f64>> {
        let step = clfqp_solve(self.variant, self.model, state, t, self.clf, &self.reference, self.params)?;
        let u = step.u.clone();
        self.last = Some(step);
        Ok(u)
    }

    fn observe(&mut self, _t: f64, _state: &State, applied: &DVector<f64>) {
        // Without a QP the slack is what the limited torque leaves unmet.
        if let Some(step) = self.last.as_mut().filter(|_| !self.variant.uses_qp()) {
            step.slack = step.row.slack_needed(applied);
        }
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        match &self.last {
            Some(s) => vec![("V", s.row.v), ("p_s", s.slack), ("kkt", s.kkt)],
            None => Vec::new(),
        }
    }
}

/// Two-link regulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClfScenario {
    pub arm: TwoLinkParams,
    pub omega_n: f64,
    pub zeta: f64,
    /// Copper-loss coefficient per joint, W/(N·m)².
    pub rbar: [f64; 2],
    pub u_bar: [f64; 2],
    pub p_max: f64,
    pub slack_weight: f64,
    pub phi: [f64; 2],
    pub u0: [f64; 2],
    pub q0: [f64; 2],
    pub qdot0: [f64; 2],
    pub q_target: [f64; 2],
    pub duration: f64,
    pub dt: f64,
    /// Band for settling time, percent of the excursion.
    pub settle_pct: f64,
    /// Slack treated as zero when judging the decay bound, relative to `eᵀWe`.
    pub slack_tolerance: f64,
}

impl Default for ClfScenario {
    fn default() -> Self {
        Self {
            arm: TwoLinkParams::default(),
            omega_n: 2.0 * PI * 2.2,
            zeta: 3f64.sqrt() / 2.0,
            rbar: [0.0833e-3, 0.222e-3],
            u_bar: [2000.0, 1000.0],
            p_max: 1000.0,
            slack_weight: 5e4,
            phi: [1.0, 1.0],
            u0: [0.0, 0.0],
            q0: [-PI / 2.0, 0.0],
            qdot0: [0.0, 0.0],
            q_target: [PI / 2.0, 0.0],
            duration: 3.0,
            dt: 1e-3,
            settle_pct: 5.0,
            slack_tolerance: 1e-3,
        }
    }
}

impl ClfScenario {
    pub fn validate(&self) -> Result<()> {
        TwoLinkArm::new(self.arm)?;
        if !(self.p_max > 0.0) {
            return Err(Error::InvalidArgument(format!("p_max = {} must be positive", self.p_max)));
        }
        if self.rbar.iter().any(|r| !(*r >= 0.0)) || self.u_bar.iter().any(|u| !(*u >= 0.0)) {
            return Err(Error::InvalidArgument("rbar and u_bar must be nonnegative".into()));
        }
        if !(self.duration > 0.0) || !(self.dt > 0.0) || self.dt > self.duration {
            return Err(Error::InvalidArgument("need 0 < dt ≤ duration".into()));
        }
        if !(self.settle_pct > 0.0 && self.settle_pct < 100.0) || !(self.slack_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("settle_pct in (0, 100) and slack_tolerance ≥ 0".into()));
        }
        if self.q0[0] == self.q_target[0] {
            return Err(Error::InvalidArgument("joint 1 must move".into()));
        }
        Ok(())
    }

    pub fn gains(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let i = DMatrix::identity(2, 2);
        (&i * self.omega_n.powi(2), &i * (2.0 * self.zeta * self.omega_n))
    }

    /// Per-joint `P` block applied to every joint; `W` follows from it.
    pub fn clf(&self) -> Result<Clf> {
        let (kp, kd) = self.gains();
        Clf::from_p(&kp, &kd, per_output_block(&damped_block(self.omega_n, self.zeta)?, 2)?)
    }

    pub fn budget(&self) -> Result<PowerBudget> {
        PowerBudget::new(
            DVector::from_element(2, self.p_max / 2.0),
            DVector::from_column_slice(&self.rbar),
            DVector::from_element(2, f64::INFINITY),
            self.p_max,
        )
    }

    pub fn params(&self) -> Result<ClfQpParams> {
        let (kp, kd) = self.gains();
        Ok(ClfQpParams {
            kp,
            kd,
            u0: DVector::from_column_slice(&self.u0),
            phi: DVector::from_column_slice(&self.phi),
            slack_weight: self.slack_weight,
            torque_limit: DVector::from_column_slice(&self.u_bar),
            budget: self.budget()?,
        })
    }

    /// Plant-side limiter: the supply model each controller is designed for.
    pub fn actuation(&self, variant: ClfVariant) -> Actuation {
        let limiter = match variant {
            ClfVariant::RelaxedDynamic => Limiter::Aggregate,
            _ => Limiter::PerJoint(PsatMode::ExactWithLosses),
        };
        Actuation::new(limiter).with_torque_limit(DVector::from_column_slice(&self.u_bar))
    }
}

/// Decay of `V` over stretches where the slack is negligible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayCheck {
    pub intervals: usize,
    pub samples: usize,
    /// Largest `V(t) / (V(t₀) e^{−ε(t−t₀)})` over all checked samples.
    pub worst_ratio: f64,
}

/// Checks `V(t) ≤ V(t₀)e^{−ε(t−t₀)}` from the start `t₀` of every maximal run
/// of samples whose slack is at most `tol · (1 + eᵀWe)`.
pub fn decay_check(times: &[f64], v: &[f64], slack: &[f64], target: &[f64], epsilon: f64, tol: f64) -> DecayCheck {
    let mut out = DecayCheck {
        intervals: 0,
        samples: 0,
        worst_ratio: 0.0,
    };
    let mut start: Option<usize> = None;
    for k in 0..times.len() {
        if slack[k] > tol * (1.0 + target[k]) {
            start = None;
            continue;
        }
        let k0 = *start.get_or_insert_with(|| {
            out.intervals += 1;
            k
        });
        out.samples += 1;
        let bound = v[k0] * (-epsilon * (times[k] - times[k0])).exp();
        if bound > 0.0 {
            out.worst_ratio = out.worst_ratio.max(v[k] / bound);
        }
    }
    out
}

/// One simulated controller with its summary metrics.
#[derive(Debug, Clone)]
pub struct ClfRun {
    pub variant: ClfVariant,
    pub log: TrajectoryLog,
    pub settling_joint1: Option<f64>,
    pub max_joint2_deviation: f64,
    /// Largest KKT residual over all QP solves.
    pub max_kkt: f64,
    /// Largest excess of the variant's power model at the commanded torque.
    pub power_violation: f64,
    pub torque_violation: f64,
    pub peak_power: f64,
    pub decay: DecayCheck,
}

/// Simulates one variant.
pub fn run_clf_variant(s: &ClfScenario, clf: &Clf, variant: ClfVariant) -> Result<ClfRun> {
    s.validate()?;
    let arm = TwoLinkArm::new(s.arm)?;
    let params = s.params()?;
    let reference = Reference::setpoint(DVector::from_column_slice(&s.q_target));
    let mut ctrl = ClfController::new(variant, &arm, clf, &params, reference.clone());
    let x0 = State::new(DVector::from_column_slice(&s.q0), DVector::from_column_slice(&s.qdot0))?;
    let log = simulate(&arm, &mut ctrl, &params.budget, &s.actuation(variant), &x0, s.duration, s.dt)?;

    let rbar = &params.budget.normalized_resistance;
    let mut power_violation = 0.0f64;
    let mut torque_violation = 0.0f64;
    let mut target = Vec::with_capacity(log.len());
    for k in 0..log.len() {
        // QP output is checked as commanded; feedback linearization as applied.
        let u = if variant.uses_qp() { &log.u_cmd[k] } else { &log.u_applied[k] };
        let qd = &log.qdot[k];
        let p: Vec<f64> = (0..2).map(|i| motor_power(u[i], qd[i], rbar[i])).collect();
        let excess = match variant {
            ClfVariant::RelaxedDynamic => p.iter().sum::<f64>() - s.p_max,
            _ => (0..2).map(|i| p[i] - params.budget.per_joint_limit[i]).fold(f64::MIN, f64::max),
        };
        power_violation = power_violation.max(excess);
        for i in 0..2 {
            torque_violation = torque_violation.max(u[i].abs() - s.u_bar[i]);
        }
        let err = TaskError::new(
            &State {
                q: log.q[k].clone(),
                qdot: log.qdot[k].clone(),
            },
            &reference,
            log.times[k],
        )?;
        target.push(err.e.dot(&(&clf.w * &err.e)));
    }
    let v = log.scalar("V").unwrap_or_default();
    let slack = log.scalar("p_s").unwrap_or_default();
    let decay = decay_check(&log.times, v, slack, &target, clf.epsilon, s.slack_tolerance);
    let max_kkt = log.scalar("kkt").unwrap_or_default().iter().fold(0.0f64, |m, v| m.max(*v));
    let settling_joint1 = settling_time(&log.times, &log.joint_position(0), s.q_target[0], s.settle_pct)?;
    let max_joint2_deviation = log.q.iter().map(|q| (q[1] - s.q_target[1]).abs()).fold(0.0, f64::max);
    let peak_power = log.power_total.iter().copied().fold(f64::MIN, f64::max);
    Ok(ClfRun {
        variant,
        settling_joint1,
        max_joint2_deviation,
        max_kkt,
        power_violation: power_violation.max(0.0),
        torque_violation: torque_violation.max(0.0),
        peak_power,
        decay,
        log,
    })
}

/// Runs C1, C2 and C3 (in that order) on `threads` workers.
pub fn run_clf_example(s: &ClfScenario, threads: usize) -> Result<(Clf, Vec<ClfRun>)> {
    s.validate()?;
    let clf = s.clf()?;
    let runs = crate::par::try_map(&ClfVariant::ALL, threads, |v| run_clf_variant(s, &clf, *v))?;
    Ok((clf, runs))
}
