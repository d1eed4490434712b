//! Torque saturation, motor power and the power-supply-limit nonlinearity.

use crate::error::{Error, Result};
use crate::model::PowerBudget;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// How the power limit is turned into a torque limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsatMode {
    /// Mechanical power only: `u·q̇ ≤ P̄`.
    ExactLossless,
    /// Mechanical power plus copper losses: `u·q̇ + R̄u² ≤ P̄`.
    ExactWithLosses,
    /// Fixed torque bound `P̄/v̄`.
    ApproxSat,
}

/// Limits of one joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub pbar: f64,
    pub rbar: f64,
    pub vbar: f64,
}

impl JointLimit {
    pub fn new(pbar: f64, rbar: f64, vbar: f64) -> Self {
        Self { pbar, rbar, vbar }
    }

    /// A limit without resistance or no-load speed.
    pub fn lossless(pbar: f64) -> Self {
        Self::new(pbar, 0.0, f64::INFINITY)
    }
}

pub fn sat(u: f64, u_max: f64) -> Result<f64> {
    if !(u_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("saturation bound {u_max} is negative")));
    }
    Ok(u.clamp(-u_max, u_max))
}

/// Electrical power drawn by a motor delivering torque `u` at speed `qdot`.
pub fn motor_power(u: f64, qdot: f64, rbar: f64) -> f64 {
    u * qdot + u * u * rbar
}

pub fn psat_approx_limit(pbar: f64, vbar: f64) -> Result<f64> {
    if !(vbar > 0.0) {
        return Err(Error::InvalidArgument(format!("no-load speed {vbar} must be positive")));
    }
    Ok(pbar / vbar)
}

/// Root of `R̄ū² + q̇ū = P̄` with the sign of `u`, in cancellation-free form.
fn lossy_root(u: f64, qdot: f64, pbar: f64, rbar: f64) -> f64 {
    let disc = (qdot * qdot + 4.0 * rbar * pbar).sqrt();
    if u > 0.0 {
        if qdot >= 0.0 {
            2.0 * pbar / (qdot + disc)
        } else {
            (disc - qdot) / (2.0 * rbar)
        }
    } else if qdot >= 0.0 {
        -(qdot + disc) / (2.0 * rbar)
    } else {
        2.0 * pbar / (qdot - disc)
    }
}

/// Largest same-sign torque not exceeding `u` in magnitude whose power stays within the limit.
///
/// The limit binds only when `P > P̄` (signed power; regenerative torque
/// passes). With the lossless model a binding limit at `q̇ = 0` admits any
/// torque and is reported as [`Error::UnboundedTorque`]. A zero resistance in
/// `ExactWithLosses` reduces to the lossless formula.
pub fn psat(u: f64, qdot: f64, limit: &JointLimit, mode: PsatMode) -> Result<f64> {
    let JointLimit { pbar, rbar, vbar } = *limit;
    if !(pbar >= 0.0) {
        return Err(Error::InvalidArgument(format!("power limit {pbar} is negative")));
    }
    match mode {
        PsatMode::ApproxSat => sat(u, psat_approx_limit(pbar, vbar)?),
        PsatMode::ExactLossless => {
            if motor_power(u, qdot, 0.0) <= pbar {
                Ok(u)
            } else if qdot == 0.0 {
                Err(Error::UnboundedTorque)
            } else {
                Ok(pbar / qdot)
            }
        }
        PsatMode::ExactWithLosses => {
            if !(rbar >= 0.0) {
                return Err(Error::InvalidArgument(format!("resistance {rbar} is negative")));
            }
            if rbar == 0.0 {
                return psat(u, qdot, limit, PsatMode::ExactLossless);
            }
            if motor_power(u, qdot, rbar) <= pbar {
                Ok(u)
            } else {
                Ok(lossy_root(u, qdot, pbar, rbar))
            }
        }
    }
}

/// Component-wise [`psat`] with the joint limits of `budget`.
pub fn psat_vector(
    u: &DVector<f64>,
    qdot: &DVector<f64>,
    budget: &PowerBudget,
    mode: PsatMode,
) -> Result<DVector<f64>> {
    if u.len() != qdot.len() || u.len() != budget.len() {
        return Err(Error::Dimension(format!(
            "u: {}, qdot: {}, budget: {}",
            u.len(),
            qdot.len(),
            budget.len()
        )));
    }
    let mut out = DVector::zeros(u.len());
    for i in 0..u.len() {
        out[i] = psat(u[i], qdot[i], &budget.joint(i), mode)?;
    }
    Ok(out)
}

/// Total power `Σ uᵢq̇ᵢ + R̄ᵢuᵢ²`.
pub fn total_power(u: &DVector<f64>, qdot: &DVector<f64>, rbar: &DVector<f64>) -> f64 {
    (0..u.len()).map(|i| motor_power(u[i], qdot[i], rbar[i])).sum()
}

/// Uniform scaling `α ∈ [0, 1]` so that the scaled torque meets the aggregate limit.
pub fn aggregate_scale(u: &DVector<f64>, qdot: &DVector<f64>, rbar: &DVector<f64>, p_max: f64) -> Result<f64> {
    if !(p_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("aggregate limit {p_max} is negative")));
    }
    let a: f64 = (0..u.len()).map(|i| rbar[i] * u[i] * u[i]).sum();
    let b: f64 = u.dot(qdot);
    if a + b <= p_max {
        return Ok(1.0);
    }
    // a α² + b α = p_max has exactly one root in (0, 1).
    let disc = (b * b + 4.0 * a * p_max).sqrt();
    let alpha = if b >= 0.0 {
        2.0 * p_max / (b + disc)
    } else {
        (disc - b) / (2.0 * a)
    };
    Ok(alpha.clamp(0.0, 1.0))
}

/// Aggregate-limit counterpart of [`psat_vector`]: scales all torques together.
pub fn psat_aggregate(
    u: &DVector<f64>,
    qdot: &DVector<f64>,
    budget: &PowerBudget,
) -> Result<DVector<f64>> {
    if u.len() != qdot.len() || u.len() != budget.len() {
        return Err(Error::Dimension("aggregate limiter operands".into()));
    }
    let alpha = aggregate_scale(u, qdot, &budget.normalized_resistance, budget.aggregate_limit)?;
    Ok(u * alpha)
}
