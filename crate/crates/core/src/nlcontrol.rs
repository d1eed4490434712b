//! PD plus gravity compensation under per-joint power limits, with the
//! energy-like Lyapunov function and its rate.

use crate::error::{Error, Result};
use crate::model::{two_link_model, LagrangianModel, PowerBudget, State, TwoLinkArm};
use crate::powerlim::{psat_vector, PsatMode};
use crate::sim::{simulate, Actuation, Controller, Limiter, TrajectoryLog};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct PbcGains {
    pub kp: DMatrix<f64>,
    pub kd: DMatrix<f64>,
}

impl PbcGains {
    pub fn new(kp: DMatrix<f64>, kd: DMatrix<f64>) -> Result<Self> {
        let n = kp.nrows();
        if kp.shape() != (n, n) || kd.shape() != (n, n) {
            return Err(Error::Dimension("gain matrices must be square and equal".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
        if !sym(&kp) || !sym(&kd) {
            return Err(Error::InvalidArgument("gains must be symmetric".into()));
        }
        if kp.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("K_p must be positive definite".into()));
        }
        if n > 0 && nalgebra::SymmetricEigen::new(kd.clone()).eigenvalues.min() < -1e-12 * (1.0 + kd.amax()) {
            return Err(Error::InvalidArgument("K_d must be positive semidefinite".into()));
        }
        Ok(Self { kp, kd })
    }

    /// `K_p = diag(mᵢω²)`, `K_d = diag(2mᵢζω)`.
    pub fn mass_scaled(masses: &[f64], omega: f64, zeta: f64) -> Result<Self> {
        let m = DVector::from_column_slice(masses);
        Self::new(
            DMatrix::from_diagonal(&(&m * omega * omega)),
            DMatrix::from_diagonal(&(&m * (2.0 * zeta * omega))),
        )
    }
}

/// `u = G(q) − K_p q − K_d q̇`.
pub fn pbc_control(model: &dyn LagrangianModel, gains: &PbcGains, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
    model.gravity(q) - &gains.kp * q - &gains.kd * qdot
}

/// `V = ½ q̇ᵀ M(q) q̇ + ½ qᵀ K_p q`.
pub fn pbc_lyapunov(model: &dyn LagrangianModel, gains: &PbcGains, q: &DVector<f64>, qdot: &DVector<f64>) -> f64 {
    model.kinetic_energy(q, qdot) + 0.5 * q.dot(&(&gains.kp * q))
}

/// `V̇` under the lossless limit, by case split over the saturating joints:
/// `−q̇ᵀ(K_d + D)q̇ − Σ_{i binding} (Pᵢ − P̄ᵢ)` with `Pᵢ = uᵢq̇ᵢ`.
pub fn pbc_lyapunov_rate(
    model: &dyn LagrangianModel,
    gains: &PbcGains,
    budget: &PowerBudget,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<f64> {
    let u = pbc_control(model, gains, q, qdot);
    let dissipation = qdot.dot(&((&gains.kd + model.damping()) * qdot));
    let mut excess = 0.0;
    for i in 0..u.len() {
        let p = u[i] * qdot[i];
        if p > budget.per_joint_limit[i] {
            excess += p - budget.per_joint_limit[i];
        }
    }
    Ok(-dissipation - excess)
}

/// Generic form `q̇ᵀ psat(u, q̇) − q̇ᵀu − q̇ᵀ(K_d + D)q̇`.
pub fn pbc_lyapunov_rate_generic(
    model: &dyn LagrangianModel,
    gains: &PbcGains,
    budget: &PowerBudget,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<f64> {
    let u = pbc_control(model, gains, q, qdot);
    let applied = psat_vector(&u, qdot, budget, PsatMode::ExactLossless)?;
    Ok(qdot.dot(&applied) - qdot.dot(&u) - qdot.dot(&((&gains.kd + model.damping()) * qdot)))
}

/// Passivity-based regulator toward `setpoint` (the origin by default).
pub struct PbcController<'a> {
    model: &'a dyn LagrangianModel,
    gains: PbcGains,
    setpoint: DVector<f64>,
    last_v: f64,
}

impl<'a> PbcController<'a> {
    pub fn new(model: &'a dyn LagrangianModel, gains: PbcGains) -> Self {
        let n = model.dof();
        Self {
            model,
            gains,
            setpoint: DVector::zeros(n),
            last_v: 0.0,
        }
    }

    pub fn with_setpoint(mut self, setpoint: DVector<f64>) -> Self {
        self.setpoint = setpoint;
        self
    }
}

impl Controller for PbcController<'_> {
    fn command(&mut self, _t: f64, state: &State) -> Result<DVector<f64>> {
        let e = &state.q - &self.setpoint;
        self.last_v = self.model.kinetic_energy(&state.q, &state.qdot) + 0.5 * e.dot(&(&self.gains.kp * &e));
        Ok(self.model.gravity(&state.q) - &self.gains.kp * e - &self.gains.kd * &state.qdot)
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![("V", self.last_v)]
    }
}

/// Scenario settings for the two-link regulation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbcScenario {
    pub arm: crate::model::TwoLinkParams,
    pub omega_n: f64,
    pub zeta: f64,
    pub joint_power: [f64; 2],
    pub q0: [f64; 2],
    pub qdot0: [f64; 2],
    pub duration: f64,
    pub dt: f64,
}

impl Default for PbcScenario {
    fn default() -> Self {
        Self {
            arm: crate::model::TwoLinkParams::default(),
            omega_n: 2.0 * PI * 2f64.sqrt(),
            zeta: 0.9,
            joint_power: [1000.0, 1000.0],
            q0: [-PI / 2.0, PI],
            qdot0: [0.0, 0.0],
            duration: 10.0,
            dt: 1e-4,
        }
    }
}

impl PbcScenario {
    pub fn validate(&self) -> Result<()> {
        TwoLinkArm::new(self.arm)?;
        if self.joint_power.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "joint power limits {:?} must be nonnegative",
                self.joint_power
            )));
        }
        if !(self.dt > 0.0 && self.duration >= self.dt) || !(self.omega_n > 0.0 && self.zeta > 0.0) {
            return Err(Error::InvalidArgument("need 0 < dt ≤ duration and ω_n, ζ > 0".into()));
        }
        Ok(())
    }

    pub fn gains(&self) -> Result<PbcGains> {
        PbcGains::mass_scaled(&[self.arm.m1, self.arm.m2], self.omega_n, self.zeta)
    }

    pub fn budget(&self) -> Result<PowerBudget> {
        let p = DVector::from_column_slice(&self.joint_power);
        let total = p.sum();
        PowerBudget::new(p, DVector::zeros(2), DVector::from_element(2, f64::INFINITY), total)
    }
}

pub fn run_example3() -> Result<TrajectoryLog> {
    run_pbc(&PbcScenario::default())
}

pub fn run_pbc(s: &PbcScenario) -> Result<TrajectoryLog> {
    s.validate()?;
    let arm = if s.arm == crate::model::TwoLinkParams::default() {
        two_link_model()
    } else {
        TwoLinkArm::new(s.arm)?
    };
    let mut ctrl = PbcController::new(&arm, s.gains()?);
    let x0 = State::new(DVector::from_column_slice(&s.q0), DVector::from_column_slice(&s.qdot0))?;
    simulate(
        &arm,
        &mut ctrl,
        &s.budget()?,
        &Actuation::new(Limiter::PerJoint(PsatMode::ExactLossless)),
        &x0,
        s.duration,
        s.dt,
    )
}
