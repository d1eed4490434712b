//! Finite-horizon optimal control of linear plants sharing one power supply.
//!
//! The condensed form (torque sequence `Υ` as the only unknown) gives the
//! cost and the power constraint as explicit quadratic forms and is used as
//! a reference. Solves run on the stage-wise form with variables
//! `(υ₀, x₁, υ₁, x₂, …, υ_{N−1}, x_N)` and the dynamics as equalities, which
//! keeps every matrix banded and every power constraint local to one stage.

use crate::error::{Error, Result};
use crate::model::{fin_system_from, linear_to_statespace, FinParams, PowerBudget, State};
use crate::optim::{
    min_eigenvalue, solve_qcqp_nonconvex, solve_qp, NonconvexOptions, QpProblem, QuadConstraint, SolveStatus,
    SolverOptions, SparseMatrix,
};
use crate::sim::{settling_time, simulate, Actuation, Controller, Limiter, TrajectoryLog};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Zero-order-hold discretization of `ẋ = F_c x + H_c υ + g_c`.
///
/// Returns `(F, H, g)` read off the exponential of the augmented matrix
/// `[[F_c, H_c, g_c], [0, 0, 0]]·Δt`.
pub fn discretize_zoh(
    fc: &DMatrix<f64>,
    hc: &DMatrix<f64>,
    gc: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = fc.nrows();
    if fc.ncols() != n || hc.nrows() != n || gc.len() != n {
        return Err(Error::Dimension(format!(
            "F_c {}x{}, H_c {}x{}, g_c {}",
            fc.nrows(),
            fc.ncols(),
            hc.nrows(),
            hc.ncols(),
            gc.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("sample time must be positive, got {dt}")));
    }
    let m = hc.ncols();
    let size = n + m + 1;
    let mut aug = DMatrix::zeros(size, size);
    aug.view_mut((0, 0), (n, n)).copy_from(fc);
    aug.view_mut((0, n), (n, m)).copy_from(hc);
    aug.view_mut((0, n + m), (n, 1)).copy_from(gc);
    let e = (aug * dt).exp();
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
        e.column(n + m).rows(0, n).into_owned(),
    ))
}

/// States `x₁ … x_N` produced by the stacked inputs `Υ = (υ₀, …, υ_{N−1})`.
pub fn rollout(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    x0: &DVector<f64>,
    upsilon: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let (nx, nu) = h.shape();
    if f.shape() != (nx, nx) || g.len() != nx || x0.len() != nx {
        return Err(Error::Dimension("dynamics and initial state disagree".into()));
    }
    if nu == 0 || upsilon.len() % nu != 0 {
        return Err(Error::Dimension(format!(
            "input stack of length {} is not a multiple of {nu}",
            upsilon.len()
        )));
    }
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(upsilon.len() / nu);
    for k in 0..upsilon.len() / nu {
        x = f * &x + h * upsilon.rows(k * nu, nu) + g;
        out.push(x.clone());
    }
    Ok(out)
}

/// Discrete dynamics, weights and references over an `N`-step horizon.
#[derive(Debug, Clone)]
pub struct Horizon {
    pub steps: usize,
    pub dt: f64,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub lambda_f: DMatrix<f64>,
    pub x0: DVector<f64>,
    /// `x*₀ … x*_N`.
    pub x_ref: Vec<DVector<f64>>,
    /// `υ*₀ … υ*_{N−1}`.
    pub u_ref: Vec<DVector<f64>>,
}

impl Horizon {
    /// Regulation to the origin: all references zero.
    #[allow(clippy::too_many_arguments)]
    pub fn regulation(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        g: DVector<f64>,
        lambda: DMatrix<f64>,
        phi: DMatrix<f64>,
        lambda_f: DMatrix<f64>,
        x0: DVector<f64>,
        steps: usize,
        dt: f64,
    ) -> Result<Self> {
        let (nx, nu) = h.shape();
        let hz = Self {
            steps,
            dt,
            f,
            h,
            g,
            lambda,
            phi,
            lambda_f,
            x0,
            x_ref: vec![DVector::zeros(nx); steps + 1],
            u_ref: vec![DVector::zeros(nu); steps],
        };
        hz.validate()?;
        Ok(hz)
    }

    pub fn nx(&self) -> usize {
        self.h.nrows()
    }

    pub fn nu(&self) -> usize {
        self.h.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.nx(), self.nu());
        if self.steps == 0 {
            return Err(Error::InvalidArgument("horizon needs at least one step".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("sample time {}", self.dt)));
        }
        if self.f.shape() != (nx, nx) || self.g.len() != nx || self.x0.len() != nx {
            return Err(Error::Dimension("dynamics and initial state disagree".into()));
        }
        if self.x_ref.len() != self.steps + 1
            || self.u_ref.len() != self.steps
            || self.x_ref.iter().any(|x| x.len() != nx)
            || self.u_ref.iter().any(|u| u.len() != nu)
        {
            return Err(Error::Dimension("reference stacks do not match the horizon".into()));
        }
        let sym = |name: &str, m: &DMatrix<f64>, n: usize, strict: bool| -> Result<()> {
            if m.shape() != (n, n) {
                return Err(Error::Dimension(format!("{name} must be {n}x{n}")));
            }
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
            let l = min_eigenvalue(m)?;
            let tol = 1e-12 * (1.0 + m.amax());
            if (strict && l <= tol) || l < -tol {
                return Err(Error::InvalidArgument(format!("{name} has eigenvalue {l:e}")));
            }
            Ok(())
        };
        sym("Λ", &self.lambda, nx, false)?;
        sym("Λ_f", &self.lambda_f, nx, false)?;
        sym("Φ", &self.phi, nu, true)
    }

    fn check_inputs(&self, upsilon: &DVector<f64>) -> Result<()> {
        if upsilon.len() != self.steps * self.nu() {
            return Err(Error::Dimension(format!(
                "input stack has length {}, expected {}",
                upsilon.len(),
                self.steps * self.nu()
            )));
        }
        Ok(())
    }

    /// `x₀ … x_N` under `Υ`.
    pub fn trajectory(&self, upsilon: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_inputs(upsilon)?;
        let mut xs = vec![self.x0.clone()];
        xs.extend(rollout(&self.f, &self.h, &self.g, &self.x0, upsilon)?);
        Ok(xs)
    }

    /// Running cost of stage `n` (or the terminal cost at `n = N`).
    fn stage_cost(&self, n: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
        let dx = x - &self.x_ref[n];
        if n == self.steps {
            return dx.dot(&(&self.lambda_f * &dx));
        }
        let du = u.map_or_else(|| -&self.u_ref[n], |u| u - &self.u_ref[n]);
        dx.dot(&(&self.lambda * &dx)) + du.dot(&(&self.phi * &du))
    }

    /// Cost-to-go `J_n` for `n = 0 … N` along the given states and inputs.
    pub fn cost_to_go(&self, states: &[DVector<f64>], upsilon: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_inputs(upsilon)?;
        if states.len() != self.steps + 1 {
            return Err(Error::Dimension(format!(
                "{} states for a {}-step horizon",
                states.len(),
                self.steps
            )));
        }
        let nu = self.nu();
        let mut j = vec![0.0; self.steps + 1];
        j[self.steps] = self.stage_cost(self.steps, &states[self.steps], None);
        for n in (0..self.steps).rev() {
            let u = upsilon.rows(n * nu, nu).into_owned();
            j[n] = j[n + 1] + self.stage_cost(n, &states[n], Some(&u));
        }
        Ok(j)
    }

    /// `J(Υ)` summed along the rollout.
    pub fn cost(&self, upsilon: &DVector<f64>) -> Result<f64> {
        let xs = self.trajectory(upsilon)?;
        Ok(self.cost_to_go(&xs, upsilon)?[0])
    }
}

/// Condensed prediction `X = x̄₀ + ḡ + Ĥ Υ` with `X = (x₁, …, x_N)` and the cost in `Υ`.
#[derive(Debug, Clone)]
pub struct HorizonMatrices {
    pub h_hat: DMatrix<f64>,
    pub x0_bar: DVector<f64>,
    pub g_bar: DVector<f64>,
    pub c_z: f64,
    pub z: DVector<f64>,
    pub zz: DMatrix<f64>,
}

impl HorizonMatrices {
    pub fn new(hz: &Horizon) -> Result<Self> {
        hz.validate()?;
        let (h_hat, x0_bar, g_bar) = prediction(hz);
        let (c_z, z, zz) = cost_from_prediction(hz, &h_hat, &(&x0_bar + &g_bar));
        Ok(Self {
            h_hat,
            x0_bar,
            g_bar,
            c_z,
            z,
            zz,
        })
    }

    /// `c_z + zᵀΥ + ΥᵀZΥ`.
    pub fn cost(&self, upsilon: &DVector<f64>) -> f64 {
        self.c_z + self.z.dot(upsilon) + upsilon.dot(&(&self.zz * upsilon))
    }
}

/// Block lower-triangular `F̂` with `F^{i−j}` in block `(i, j)`.
pub fn f_hat(f: &DMatrix<f64>, steps: usize) -> DMatrix<f64> {
    let nx = f.nrows();
    let mut out = DMatrix::zeros(steps * nx, steps * nx);
    let mut p = DMatrix::identity(nx, nx);
    for d in 0..steps {
        for j in 0..steps - d {
            out.view_mut(((j + d) * nx, j * nx), (nx, nx)).copy_from(&p);
        }
        p = f * p;
    }
    out
}

/// `(Ĥ, x̄₀, ḡ)`: block `(n, i)` of `Ĥ` is `F^{n−i}H` for `i ≤ n`.
fn prediction(hz: &Horizon) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (nx, nu, n) = (hz.nx(), hz.nu(), hz.steps);
    let mut h_hat = DMatrix::zeros(n * nx, n * nu);
    let mut fh = hz.h.clone();
    for d in 0..n {
        for i in 0..n - d {
            h_hat.view_mut(((i + d) * nx, i * nu), (nx, nu)).copy_from(&fh);
        }
        fh = &hz.f * fh;
    }
    let mut x0_bar = DVector::zeros(n * nx);
    let mut g_bar = DVector::zeros(n * nx);
    let mut x = hz.x0.clone();
    let mut gs = DVector::zeros(nx);
    for k in 0..n {
        x = &hz.f * x;
        gs = &hz.f * gs + &hz.g;
        x0_bar.rows_mut(k * nx, nx).copy_from(&x);
        g_bar.rows_mut(k * nx, nx).copy_from(&gs);
    }
    (h_hat, x0_bar, g_bar)
}

fn cost_from_prediction(hz: &Horizon, h_hat: &DMatrix<f64>, offset: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let (nx, nu, n) = (hz.nx(), hz.nu(), hz.steps);
    // Λ̃ Ĥ and Λ̃ (x̄₀ + ḡ − X*) block by block.
    let mut lh = DMatrix::zeros(n * nx, n * nu);
    let mut lr = DVector::zeros(n * nx);
    let mut c_z = 0.0;
    for k in 0..n {
        let w = if k + 1 == n { &hz.lambda_f } else { &hz.lambda };
        let rows = h_hat.view((k * nx, 0), (nx, n * nu));
        lh.view_mut((k * nx, 0), (nx, n * nu)).copy_from(&(w * rows));
        let r = offset.rows(k * nx, nx) - &hz.x_ref[k + 1];
        let wr = w * &r;
        c_z += r.dot(&wr);
        lr.rows_mut(k * nx, nx).copy_from(&wr);
    }
    let mut zz = h_hat.tr_mul(&lh);
    let mut z = h_hat.tr_mul(&lr) * 2.0;
    for k in 0..n {
        let mut b = zz.view_mut((k * nu, k * nu), (nu, nu));
        b += &hz.phi;
        let pu = &hz.phi * &hz.u_ref[k];
        let mut zb = z.rows_mut(k * nu, nu);
        zb -= &pu * 2.0;
        c_z += hz.u_ref[k].dot(&pu);
    }
    // The stage-0 state term does not depend on Υ.
    let dx0 = &hz.x0 - &hz.x_ref[0];
    c_z += dx0.dot(&(&hz.lambda * &dx0));
    zz = (&zz + zz.transpose()) * 0.5;
    (c_z, z, zz)
}

/// `(c_z, z, Z)` with `J(Υ) = c_z + zᵀΥ + ΥᵀZΥ`.
pub fn assemble_cost(hz: &Horizon) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let m = HorizonMatrices::new(hz)?;
    Ok((m.c_z, m.z, m.zz))
}

/// Lifts `a x_k ≤ b` for `k = 1 … N` to `A Υ ≤ B`.
pub fn lift_linear_constraints(
    a_neq: &DMatrix<f64>,
    b_neq: &DVector<f64>,
    hz: &Horizon,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let empty_u = DMatrix::zeros(a_neq.nrows(), hz.nu());
    lift_rows(a_neq, &empty_u, b_neq, hz, 1)
}

/// Lifts `a_x x_k + a_u υ_k ≤ b` for `k = 0 … N−1` to `A Υ ≤ B`.
pub fn lift_mixed_constraints(
    a_x: &DMatrix<f64>,
    a_u: &DMatrix<f64>,
    b: &DVector<f64>,
    hz: &Horizon,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    lift_rows(a_x, a_u, b, hz, 0)
}

fn lift_rows(
    a_x: &DMatrix<f64>,
    a_u: &DMatrix<f64>,
    b: &DVector<f64>,
    hz: &Horizon,
    first: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    hz.validate()?;
    let (nx, nu, n) = (hz.nx(), hz.nu(), hz.steps);
    let rows = b.len();
    if a_x.shape() != (rows, nx) || a_u.shape() != (rows, nu) {
        return Err(Error::Dimension(format!(
            "constraint rows: a_x {:?}, a_u {:?}, b {rows}",
            a_x.shape(),
            a_u.shape()
        )));
    }
    if rows == 0 {
        return Ok((DMatrix::zeros(0, n * nu), DVector::zeros(0)));
    }
    let (h_hat, x0_bar, g_bar) = prediction(hz);
    let offset = x0_bar + g_bar;
    let mut a = DMatrix::zeros(n * rows, n * nu);
    let mut rhs = DVector::zeros(n * rows);
    for (blk, k) in (first..first + n).enumerate() {
        let r0 = blk * rows;
        let mut rb = b.clone();
        if k == 0 {
            rb -= a_x * &hz.x0;
        } else {
            let hrow = h_hat.view(((k - 1) * nx, 0), (nx, n * nu));
            a.view_mut((r0, 0), (rows, n * nu)).copy_from(&(a_x * hrow));
            rb -= a_x * offset.rows((k - 1) * nx, nx);
        }
        if k < n {
            let mut au = a.view_mut((r0, k * nu), (rows, nu));
            au += a_u;
        }
        rhs.rows_mut(r0, rows).copy_from(&rb);
    }
    Ok((a, rhs))
}

/// `(E_n, χ_n)` over the full stack `Υ` such that
/// `ΥᵀE_nΥ + χ_nᵀΥ = (q̇_a)_nᵀυ_n + υ_nᵀ diag(R̄) υ_n` with `(q̇_a)_n = V x_n`.
pub fn power_constraint_terms(
    hz: &Horizon,
    velocity_map: &DMatrix<f64>,
    rbar: &DVector<f64>,
    n: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    hz.validate()?;
    let (nx, nu, steps) = (hz.nx(), hz.nu(), hz.steps);
    if n >= steps {
        return Err(Error::InvalidArgument(format!("stage {n} outside 0..{steps}")));
    }
    if velocity_map.shape() != (nu, nx) || rbar.len() != nu {
        return Err(Error::Dimension("velocity map must be n_u x n_x and R̄ of length n_u".into()));
    }
    let mut e = DMatrix::zeros(steps * nu, steps * nu);
    let mut chi = DVector::zeros(steps * nu);
    e.view_mut((n * nu, n * nu), (nu, nu))
        .copy_from(&DMatrix::from_diagonal(rbar));
    // β = V(Fⁿx₀ + Σ F^{n−1−i} g); cross block (i, n) is ½(V F^{n−1−i} H)ᵀ.
    let mut fk = DMatrix::identity(nx, nx);
    let mut gsum = DVector::zeros(nx);
    for i in (0..n).rev() {
        let c = (velocity_map * &fk * &hz.h).transpose() * 0.5;
        e.view_mut((i * nu, n * nu), (nu, nu)).copy_from(&c);
        e.view_mut((n * nu, i * nu), (nu, nu)).copy_from(&c.transpose());
        gsum += &fk * &hz.g;
        fk = &hz.f * fk;
    }
    let beta = velocity_map * (&fk * &hz.x0 + gsum);
    chi.rows_mut(n * nu, nu).copy_from(&beta);
    Ok((e, chi))
}

/// Electrical power `q̇ᵀυ + υᵀdiag(R̄)υ` of one stage.
pub fn stage_power(qdot: &DVector<f64>, u: &DVector<f64>, rbar: &DVector<f64>) -> f64 {
    qdot.iter()
        .zip(u.iter())
        .zip(rbar.iter())
        .map(|((v, u), r)| v * u + r * u * u)
        .sum()
}

/// Linear state and input constraints applied at every stage.
#[derive(Debug, Clone)]
pub struct StageConstraints {
    /// Rows `a x_k ≤ b` for `k = 1 … N`.
    pub state_a: DMatrix<f64>,
    pub state_b: DVector<f64>,
    /// Rows `a_x x_k + a_u υ_k ≤ b` for `k = 0 … N−1`.
    pub mixed_ax: DMatrix<f64>,
    pub mixed_au: DMatrix<f64>,
    pub mixed_b: DVector<f64>,
    /// `(q̇_a)_k = V x_k`.
    pub velocity_map: DMatrix<f64>,
}

impl StageConstraints {
    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        let ok = self.state_a.shape() == (self.state_b.len(), nx)
            && self.mixed_ax.shape() == (self.mixed_b.len(), nx)
            && self.mixed_au.shape() == (self.mixed_b.len(), nu)
            && self.velocity_map.shape() == (nu, nx);
        if !ok {
            return Err(Error::Dimension("stage constraint shapes".into()));
        }
        Ok(())
    }
}

/// How a controller models the shared supply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerModel {
    /// Aggregate quadratic limit; the solver allocates power among joints.
    #[serde(rename = "C1")]
    DynamicAllocation,
    /// Exact per-joint quadratic limits `P̄ᵢ`.
    #[serde(rename = "C2")]
    StaticExact,
    /// Per-joint torque bound `P̄ᵢ/v̄ᵢ`; `symmetric = false` bounds only positive torque.
    #[serde(rename = "C3")]
    StaticApprox { symmetric: bool },
}

impl PowerModel {
    pub fn label(&self) -> &'static str {
        match self {
            PowerModel::DynamicAllocation => "C1",
            PowerModel::StaticExact => "C2",
            PowerModel::StaticApprox { .. } => "C3",
        }
    }
}

impl fmt::Display for PowerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PowerModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" | "dynamic" => Ok(PowerModel::DynamicAllocation),
            "C2" | "c2" | "static-exact" => Ok(PowerModel::StaticExact),
            "C3" | "c3" | "static-approx" => Ok(PowerModel::StaticApprox { symmetric: true }),
            other => Err(Error::InvalidArgument(format!("unknown controller variant {other:?}"))),
        }
    }
}

/// Stage-wise QP with layout `[υ₀, x₁, υ₁, x₂, …]`; its objective equals `J`.
#[derive(Debug, Clone)]
pub struct StageQp {
    pub problem: QpProblem,
    pub model: PowerModel,
    nx: usize,
    nu: usize,
    steps: usize,
}

impl StageQp {
    fn block(&self) -> usize {
        self.nx + self.nu
    }

    fn u_index(&self, n: usize) -> usize {
        n * self.block()
    }

    /// Index of `x_k`, `k ≥ 1`.
    fn x_index(&self, k: usize) -> usize {
        (k - 1) * self.block() + self.nu
    }

    pub fn inputs(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.steps * self.nu);
        for n in 0..self.steps {
            out.rows_mut(n * self.nu, self.nu)
                .copy_from(&y.rows(self.u_index(n), self.nu));
        }
        out
    }

    /// Stacks inputs with their exact rollout.
    pub fn point(&self, hz: &Horizon, upsilon: &DVector<f64>) -> Result<DVector<f64>> {
        let xs = hz.trajectory(upsilon)?;
        let mut y = DVector::zeros(self.steps * self.block());
        for n in 0..self.steps {
            y.rows_mut(self.u_index(n), self.nu)
                .copy_from(&upsilon.rows(n * self.nu, self.nu));
            y.rows_mut(self.x_index(n + 1), self.nx).copy_from(&xs[n + 1]);
        }
        Ok(y)
    }
}

/// Builds the stage-wise problem for one power model.
pub fn build_controller(
    model: PowerModel,
    hz: &Horizon,
    cons: &StageConstraints,
    budget: &PowerBudget,
) -> Result<StageQp> {
    hz.validate()?;
    let (nx, nu, steps) = (hz.nx(), hz.nu(), hz.steps);
    cons.validate(nx, nu)?;
    budget.validate()?;
    if budget.len() != nu {
        return Err(Error::Dimension(format!("budget for {} joints, plant has {nu}", budget.len())));
    }
    let qp = StageQp {
        problem: QpProblem::new(SparseMatrix::zeros(0, 0), DVector::zeros(0)),
        model,
        nx,
        nu,
        steps,
    };
    let dim = steps * qp.block();
    let push_block = |trip: &mut Vec<(usize, usize, f64)>, r0: usize, c0: usize, m: &DMatrix<f64>, s: f64| {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    trip.push((r0 + i, c0 + j, s * m[(i, j)]));
                }
            }
        }
    };

    // Objective ½yᵀHy + fᵀy + c.
    let mut hess = Vec::new();
    let mut lin = DVector::zeros(dim);
    let dx0 = &hz.x0 - &hz.x_ref[0];
    let mut constant = dx0.dot(&(&hz.lambda * &dx0));
    for n in 0..steps {
        let iu = qp.u_index(n);
        push_block(&mut hess, iu, iu, &hz.phi, 2.0);
        let pu = &hz.phi * &hz.u_ref[n];
        lin.rows_mut(iu, nu).copy_from(&(&pu * -2.0));
        constant += hz.u_ref[n].dot(&pu);
        let k = n + 1;
        let w = if k == steps { &hz.lambda_f } else { &hz.lambda };
        let ix = qp.x_index(k);
        push_block(&mut hess, ix, ix, w, 2.0);
        let wx = w * &hz.x_ref[k];
        lin.rows_mut(ix, nx).copy_from(&(&wx * -2.0));
        constant += hz.x_ref[k].dot(&wx);
    }

    // x_{n+1} − F x_n − H υ_n = g.
    let mut eq = Vec::new();
    let mut eq_rhs = DVector::zeros(steps * nx);
    let ident = DMatrix::<f64>::identity(nx, nx);
    for n in 0..steps {
        let r0 = n * nx;
        push_block(&mut eq, r0, qp.x_index(n + 1), &ident, 1.0);
        push_block(&mut eq, r0, qp.u_index(n), &hz.h, -1.0);
        let mut rhs = hz.g.clone();
        if n == 0 {
            rhs += &hz.f * &hz.x0;
        } else {
            push_block(&mut eq, r0, qp.x_index(n), &hz.f, -1.0);
        }
        eq_rhs.rows_mut(r0, nx).copy_from(&rhs);
    }

    let mut ineq = Vec::new();
    let mut ineq_rhs: Vec<f64> = Vec::new();
    for k in 1..=steps {
        let r0 = ineq_rhs.len();
        push_block(&mut ineq, r0, qp.x_index(k), &cons.state_a, 1.0);
        ineq_rhs.extend(cons.state_b.iter());
    }
    for n in 0..steps {
        let r0 = ineq_rhs.len();
        push_block(&mut ineq, r0, qp.u_index(n), &cons.mixed_au, 1.0);
        if n == 0 {
            let shift = &cons.mixed_ax * &hz.x0;
            ineq_rhs.extend(cons.mixed_b.iter().zip(shift.iter()).map(|(b, s)| b - s));
        } else {
            push_block(&mut ineq, r0, qp.x_index(n), &cons.mixed_ax, 1.0);
            ineq_rhs.extend(cons.mixed_b.iter());
        }
    }

    let mut quad = Vec::new();
    let v = &cons.velocity_map;
    let qdot0 = v * &hz.x0;
    // Quadratic `Σᵢ∈joints q̇ᵢυᵢ + R̄ᵢυᵢ² ≤ bound` on stage n.
    let power_row = |n: usize, joints: &[usize], bound: f64| {
        let iu = qp.u_index(n);
        let mut e = Vec::new();
        let mut chi = Vec::new();
        for &i in joints {
            let r = budget.normalized_resistance[i];
            if r != 0.0 {
                e.push((iu + i, iu + i, r));
            }
            if n == 0 {
                if qdot0[i] != 0.0 {
                    chi.push((iu + i, qdot0[i]));
                }
            } else {
                let ix = qp.x_index(n);
                for c in 0..nx {
                    let w = 0.5 * v[(i, c)];
                    if w != 0.0 {
                        e.push((ix + c, iu + i, w));
                        e.push((iu + i, ix + c, w));
                    }
                }
            }
        }
        chi.sort_by_key(|c| c.0);
        QuadConstraint::new(SparseMatrix::from_triplets(dim, dim, &e), chi, bound)
    };
    match model {
        PowerModel::DynamicAllocation => {
            let all: Vec<usize> = (0..nu).collect();
            for n in 0..steps {
                quad.push(power_row(n, &all, budget.aggregate_limit));
            }
        }
        PowerModel::StaticExact => {
            for n in 0..steps {
                for i in 0..nu {
                    quad.push(power_row(n, &[i], budget.per_joint_limit[i]));
                }
            }
        }
        PowerModel::StaticApprox { symmetric } => {
            for n in 0..steps {
                for i in 0..nu {
                    let bound = budget.per_joint_limit[i] / budget.no_load_speed[i];
                    let r0 = ineq_rhs.len();
                    ineq.push((r0, qp.u_index(n) + i, 1.0));
                    ineq_rhs.push(bound);
                    if symmetric {
                        ineq.push((r0 + 1, qp.u_index(n) + i, -1.0));
                        ineq_rhs.push(bound);
                    }
                }
            }
        }
    }

    let mut problem = QpProblem::new(SparseMatrix::from_triplets(dim, dim, &hess), lin)
        .with_equalities(SparseMatrix::from_triplets(steps * nx, dim, &eq), eq_rhs)
        .with_inequalities(
            SparseMatrix::from_triplets(ineq_rhs.len(), dim, &ineq),
            DVector::from_vec(ineq_rhs),
        )
        .with_quadratic(quad);
    problem.constant = constant;
    problem.validate()?;
    Ok(StageQp { problem, ..qp })
}

/// Optimized input sequence and its predicted trajectory.
#[derive(Debug, Clone)]
pub struct Plan {
    pub model: PowerModel,
    pub inputs: DVector<f64>,
    /// `x₀ … x_N`.
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Fraction of the warm start kept to make it feasible.
    pub warm_scale: f64,
}

/// Relative tightening of every limit inside [`solve_plan`].
pub const SOLVE_MARGIN: f64 = 1e-8;

/// Largest `α ∈ [0, 1]` (to bisection accuracy) whose scaled inputs are feasible.
fn feasible_scale(qp: &StageQp, hz: &Horizon, upsilon: &DVector<f64>, tol: f64) -> Result<f64> {
    let ok = |a: f64| -> Result<bool> {
        let y = qp.point(hz, &(upsilon * a))?;
        Ok(qp.problem.max_relative_violation(&y) <= tol)
    };
    if ok(1.0)? {
        return Ok(1.0);
    }
    if !ok(0.0)? {
        return Err(Error::Infeasible(format!(
            "{}: zero input violates the constraints from this initial state",
            qp.model
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Solves one controller. The approximate model is a convex QP; the exact
/// models start from the scaled warm start (zero inputs when absent) and
/// descend monotonically from it.
///
/// Limits are tightened by [`SOLVE_MARGIN`] (relative) before solving so
/// that the returned plan meets the nominal limits under exact evaluation
/// despite the solver's relative feasibility tolerance.
pub fn solve_plan(
    model: PowerModel,
    hz: &Horizon,
    cons: &StageConstraints,
    budget: &PowerBudget,
    warm: Option<&DVector<f64>>,
    options: &NonconvexOptions,
) -> Result<Plan> {
    let shrink = 1.0 - SOLVE_MARGIN;
    let cons = StageConstraints {
        state_b: &cons.state_b * shrink,
        mixed_b: &cons.mixed_b * shrink,
        ..cons.clone()
    };
    let budget = PowerBudget {
        per_joint_limit: &budget.per_joint_limit * shrink,
        aggregate_limit: budget.aggregate_limit * shrink,
        ..budget.clone()
    };
    let (cons, budget) = (&cons, &budget);
    let qp = build_controller(model, hz, cons, budget)?;
    let zero = DVector::zeros(hz.steps * hz.nu());
    let warm = warm.unwrap_or(&zero);
    hz.check_inputs(warm)?;
    let (y, status, iterations, warm_scale) = if matches!(model, PowerModel::StaticApprox { .. }) {
        let y0 = qp.point(hz, warm)?;
        let sol = solve_qp(&qp.problem, &options.qp, Some(&y0))?;
        (sol.y, sol.status, sol.iterations, 1.0)
    } else {
        let alpha = feasible_scale(&qp, hz, warm, options.feas_tol)?;
        let y0 = qp.point(hz, &(warm * alpha))?;
        let sol = solve_qcqp_nonconvex(&qp.problem, &y0, options)?;
        (sol.y, sol.status, sol.outer_iterations, alpha)
    };
    if status == SolveStatus::Infeasible {
        return Err(Error::Infeasible(format!("{model}: solver reported infeasibility")));
    }
    let inputs = qp.inputs(&y);
    let states = hz.trajectory(&inputs)?;
    let cost = hz.cost_to_go(&states, &inputs)?[0];
    Ok(Plan {
        model,
        inputs,
        states,
        cost,
        status,
        iterations,
        warm_scale,
    })
}

/// Open-loop plan execution or re-solving at every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    #[default]
    SingleShot,
    Receding,
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-shot" => Ok(ExecutionMode::SingleShot),
            "receding" => Ok(ExecutionMode::Receding),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected single-shot or receding)"
            ))),
        }
    }
}

/// Fin actuation system: four decoupled unit-inertia actuators on a 750 W supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinExample {
    pub m: f64,
    pub d: f64,
    /// Peak torque ū.
    pub u_bar: f64,
    pub u_stall: f64,
    pub qdot_max: f64,
    pub rbar: f64,
    pub p_max: f64,
    pub dt: f64,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub lambda_diag: Vec<f64>,
    pub phi_diag: Vec<f64>,
    pub lambda_f_diag: Vec<f64>,
    /// Bound both torque signs in the approximate model.
    pub c3_symmetric: bool,
    pub mode: ExecutionMode,
    /// Samples simulated in receding mode (defaults to the horizon).
    pub receding_steps: Option<usize>,
}

impl Default for FinExample {
    fn default() -> Self {
        let dt = 1e-3;
        let scale = |v: [f64; 8], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        Self {
            m: 1.0,
            d: 0.05,
            u_bar: 180.0,
            u_stall: 500.0,
            qdot_max: 4.0,
            rbar: 0.0056,
            p_max: 750.0,
            dt,
            steps: 300,
            x0: vec![0.5, -0.16, 0.08, 0.28, 0.0, 0.0, 0.0, 0.0],
            lambda_diag: scale([2.0, 2.0, 2.0, 2.0, dt, dt, dt, dt], 0.5 / (dt * dt)),
            phi_diag: vec![1.0; 4],
            lambda_f_diag: scale([0.1, 0.1, 0.1, 0.1, dt, dt, dt, dt], 10.0 / (dt * dt)),
            c3_symmetric: true,
            mode: ExecutionMode::SingleShot,
            receding_steps: None,
        }
    }
}

impl FinExample {
    pub fn joints(&self) -> usize {
        self.phi_diag.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints();
        if n == 0 || self.x0.len() != 2 * n || self.lambda_diag.len() != 2 * n || self.lambda_f_diag.len() != 2 * n {
            return Err(Error::Dimension(format!(
                "{n} joints need x0, Λ and Λ_f of length {}",
                2 * n
            )));
        }
        let positive = [
            ("m", self.m),
            ("u_bar", self.u_bar),
            ("u_stall", self.u_stall),
            ("qdot_max", self.qdot_max),
            ("p_max", self.p_max),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.d >= 0.0) || !(self.rbar >= 0.0) {
            return Err(Error::InvalidArgument("d and rbar must be nonnegative".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("horizon must have at least one step".into()));
        }
        if self.receding_steps == Some(0) {
            return Err(Error::InvalidArgument("receding_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> Result<Horizon> {
        self.validate()?;
        let plant = fin_system_from(&FinParams {
            m: self.m,
            d: self.d,
            joints: self.joints(),
        })?;
        let (fc, hc, gc) = linear_to_statespace(&plant)?;
        let (f, h, g) = discretize_zoh(&fc, &hc, &gc, self.dt)?;
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        Horizon::regulation(
            f,
            h,
            g,
            diag(&self.lambda_diag),
            diag(&self.phi_diag),
            diag(&self.lambda_f_diag),
            DVector::from_column_slice(&self.x0),
            self.steps,
            self.dt,
        )
    }

    /// Speed limits on `x₁ … x_N`, torque limits and the stall curve on every stage.
    pub fn constraints(&self) -> StageConstraints {
        let n = self.joints();
        let mut state_a = DMatrix::zeros(2 * n, 2 * n);
        let mut mixed_ax = DMatrix::zeros(4 * n, 2 * n);
        let mut mixed_au = DMatrix::zeros(4 * n, n);
        let mut mixed_b = DVector::zeros(4 * n);
        let slope = self.u_stall / self.qdot_max;
        for i in 0..n {
            state_a[(2 * i, n + i)] = 1.0;
            state_a[(2 * i + 1, n + i)] = -1.0;
            // ±υ ≤ ū
            mixed_au[(4 * i, i)] = 1.0;
            mixed_au[(4 * i + 1, i)] = -1.0;
            mixed_b[4 * i] = self.u_bar;
            mixed_b[4 * i + 1] = self.u_bar;
            // υ ≤ u_s(1 − q̇/q̇_max) and −υ ≤ u_s(1 + q̇/q̇_max)
            mixed_au[(4 * i + 2, i)] = 1.0;
            mixed_ax[(4 * i + 2, n + i)] = slope;
            mixed_au[(4 * i + 3, i)] = -1.0;
            mixed_ax[(4 * i + 3, n + i)] = -slope;
            mixed_b[4 * i + 2] = self.u_stall;
            mixed_b[4 * i + 3] = self.u_stall;
        }
        let mut velocity_map = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            velocity_map[(i, n + i)] = 1.0;
        }
        StageConstraints {
            state_a,
            state_b: DVector::from_element(2 * n, self.qdot_max),
            mixed_ax,
            mixed_au,
            mixed_b,
            velocity_map,
        }
    }

    /// Static split `P̄ᵢ = P_max/n`.
    pub fn budget(&self) -> Result<PowerBudget> {
        PowerBudget::uniform(self.joints(), self.p_max, self.rbar, self.qdot_max)
    }

    pub fn models(&self) -> [PowerModel; 3] {
        [
            PowerModel::DynamicAllocation,
            PowerModel::StaticExact,
            PowerModel::StaticApprox {
                symmetric: self.c3_symmetric,
            },
        ]
    }
}

/// Simulation record of one controller on the fin system.
#[derive(Debug, Clone)]
pub struct FinRun {
    pub model: PowerModel,
    /// Plan cost `J` at `t = 0` (the first plan in receding mode).
    pub cost: f64,
    pub plan: Plan,
    /// Samples with scalar `J` (realized cost-to-go).
    pub log: TrajectoryLog,
    /// 5 % settling time per joint.
    pub settling: Vec<Option<f64>>,
}

impl FinRun {
    /// Largest violation of the controller's own constraint model by the commanded torques.
    pub fn model_violation(&self, cfg: &FinExample) -> Result<f64> {
        let budget = cfg.budget()?;
        let cons = cfg.constraints();
        let mut worst = 0.0f64;
        for k in 0..self.log.len().saturating_sub(1) {
            let u = &self.log.u_cmd[k];
            let qdot = &self.log.qdot[k];
            let x = State::new(self.log.q[k].clone(), qdot.clone())?.to_vector();
            let lin = &cons.mixed_ax * &x + &cons.mixed_au * u - &cons.mixed_b;
            worst = worst.max(lin.max());
            if k > 0 {
                worst = worst.max((&cons.state_a * &x - &cons.state_b).max());
            }
            match self.model {
                PowerModel::DynamicAllocation => {
                    worst = worst.max(stage_power(qdot, u, &budget.normalized_resistance) - budget.aggregate_limit);
                }
                PowerModel::StaticExact => {
                    for i in 0..u.len() {
                        let p = qdot[i] * u[i] + budget.normalized_resistance[i] * u[i] * u[i];
                        worst = worst.max(p - budget.per_joint_limit[i]);
                    }
                }
                PowerModel::StaticApprox { symmetric } => {
                    for i in 0..u.len() {
                        let bound = budget.per_joint_limit[i] / budget.no_load_speed[i];
                        let mag = if symmetric { u[i].abs() } else { u[i] };
                        worst = worst.max(mag - bound);
                    }
                }
            }
        }
        Ok(worst)
    }
}

struct Playback<'a> {
    inputs: &'a DVector<f64>,
    nu: usize,
    dt: f64,
}

impl Controller for Playback<'_> {
    fn command(&mut self, t: f64, _state: &State) -> Result<DVector<f64>> {
        let k = (t / self.dt).round() as usize;
        let steps = self.inputs.len() / self.nu;
        Ok(if k < steps {
            self.inputs.rows(k * self.nu, self.nu).into_owned()
        } else {
            DVector::zeros(self.nu)
        })
    }
}

struct Receding<'a> {
    model: PowerModel,
    horizon: Horizon,
    cons: &'a StageConstraints,
    budget: &'a PowerBudget,
    options: &'a NonconvexOptions,
    warm: DVector<f64>,
    first: Option<Plan>,
}

impl Controller for Receding<'_> {
    fn command(&mut self, _t: f64, state: &State) -> Result<DVector<f64>> {
        let nu = self.horizon.nu();
        self.horizon.x0 = state.to_vector();
        let plan = solve_plan(self.model, &self.horizon, self.cons, self.budget, Some(&self.warm), self.options)?;
        // Shift by one stage and hold the last input for the next warm start.
        let n = self.horizon.steps;
        let mut warm = DVector::zeros(n * nu);
        if n > 1 {
            warm.rows_mut(0, (n - 1) * nu).copy_from(&plan.inputs.rows(nu, (n - 1) * nu));
        }
        warm.rows_mut((n - 1) * nu, nu)
            .copy_from(&plan.inputs.rows((n - 1) * nu, nu));
        self.warm = warm;
        let u = plan.inputs.rows(0, nu).into_owned();
        self.first.get_or_insert(plan);
        Ok(u)
    }
}

/// Solver settings tuned for the fin problem scale.
pub fn fin_solver_options() -> NonconvexOptions {
    NonconvexOptions {
        trust_radius: 50.0,
        max_trust_radius: 1e4,
        max_outer: 200,
        step_tol: 1e-7,
        feas_tol: 1e-9,
        qp: SolverOptions::default(),
    }
}

/// Plans for C3, C2, C1 in that order: each exact model starts from the
/// previous, more conservative solution.
pub fn fin_plans(cfg: &FinExample, hz: &Horizon, options: &NonconvexOptions) -> Result<[Plan; 3]> {
    let cons = cfg.constraints();
    let budget = cfg.budget()?;
    let [c1, c2, c3] = cfg.models();
    let p3 = solve_plan(c3, hz, &cons, &budget, None, options)?;
    let p2 = solve_plan(c2, hz, &cons, &budget, Some(&p3.inputs), options)?;
    let p1 = solve_plan(c1, hz, &cons, &budget, Some(&p2.inputs), options)?;
    Ok([p1, p2, p3])
}

fn finish_run(cfg: &FinExample, hz: &Horizon, plan: Plan, mut log: TrajectoryLog) -> Result<FinRun> {
    let nu = hz.nu();
    let samples = log.len();
    let steps = samples - 1;
    let mut eval = hz.clone();
    eval.steps = steps;
    eval.x_ref = vec![DVector::zeros(hz.nx()); steps + 1];
    eval.u_ref = vec![DVector::zeros(nu); steps];
    let states: Vec<DVector<f64>> = (0..samples)
        .map(|k| State::new(log.q[k].clone(), log.qdot[k].clone()).map(|s| s.to_vector()))
        .collect::<Result<_>>()?;
    let mut applied = DVector::zeros(steps * nu);
    for k in 0..steps {
        applied.rows_mut(k * nu, nu).copy_from(&log.u_applied[k]);
    }
    let j = eval.cost_to_go(&states, &applied)?;
    log.scalars.insert("J".into(), j);
    let settling = (0..cfg.joints())
        .map(|i| settling_time(&log.times, &log.joint_position(i), 0.0, 5.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(FinRun {
        model: plan.model,
        cost: plan.cost,
        plan,
        log,
        settling,
    })
}

/// Runs C1, C2 and C3 on the fin example and plays the torques back through
/// the plant with the torque limit and the aggregate supply limit.
pub fn run_fin_example(cfg: &FinExample) -> Result<Vec<FinRun>> {
    run_fin_example_with(cfg, &fin_solver_options())
}

pub fn run_fin_example_with(cfg: &FinExample, options: &NonconvexOptions) -> Result<Vec<FinRun>> {
    let hz = cfg.horizon()?;
    let plant = fin_system_from(&FinParams {
        m: cfg.m,
        d: cfg.d,
        joints: cfg.joints(),
    })?;
    let budget = cfg.budget()?;
    let actuation = Actuation::new(Limiter::Aggregate).with_torque_limit(DVector::from_element(cfg.joints(), cfg.u_bar));
    let x0 = State::from_vector(&hz.x0);
    let mut runs = Vec::with_capacity(3);
    match cfg.mode {
        ExecutionMode::SingleShot => {
            for plan in fin_plans(cfg, &hz, options)? {
                let mut ctrl = Playback {
                    inputs: &plan.inputs,
                    nu: hz.nu(),
                    dt: cfg.dt,
                };
                let duration = cfg.steps as f64 * cfg.dt;
                let log = simulate(&plant, &mut ctrl, &budget, &actuation, &x0, duration, cfg.dt)?;
                runs.push(finish_run(cfg, &hz, plan, log)?);
            }
        }
        ExecutionMode::Receding => {
            let cons = cfg.constraints();
            let plans = fin_plans(cfg, &hz, options)?;
            for plan in plans {
                let mut ctrl = Receding {
                    model: plan.model,
                    horizon: hz.clone(),
                    cons: &cons,
                    budget: &budget,
                    options,
                    warm: plan.inputs.clone(),
                    first: None,
                };
                let duration = cfg.receding_steps.unwrap_or(cfg.steps) as f64 * cfg.dt;
                let log = simulate(&plant, &mut ctrl, &budget, &actuation, &x0, duration, cfg.dt)?;
                let first = ctrl.first.take().unwrap_or(plan);
                runs.push(finish_run(cfg, &hz, first, log)?);
            }
        }
    }
    Ok(runs)
}
