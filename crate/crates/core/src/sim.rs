//! Fixed-step RK4 simulation of plants driven through the power limit.
//!
//! The controller and the limiter run once per step at the step start; the
//! applied torque is held over the step (sample-and-hold).

use crate::error::{Error, Result};
use crate::model::{LagrangianModel, LinearPlant, PowerBudget, State};
use crate::powerlim::{motor_power, psat_aggregate, psat_vector, PsatMode};
use nalgebra::DVector;
use std::collections::BTreeMap;
use std::path::Path;

/// Plant dynamics `q̈ = f(q, q̇, u)`.
pub trait Dynamics {
    fn dof(&self) -> usize;
    fn accel(&self, q: &DVector<f64>, qdot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
}

impl Dynamics for LinearPlant {
    fn dof(&self) -> usize {
        LinearPlant::dof(self)
    }

    fn accel(&self, q: &DVector<f64>, qdot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.acceleration(q, qdot, u)
    }
}

impl<T: LagrangianModel> Dynamics for T {
    fn dof(&self) -> usize {
        LagrangianModel::dof(self)
    }

    fn accel(&self, q: &DVector<f64>, qdot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.acceleration(q, qdot, u)
    }
}

/// Torque feedback law evaluated once per step.
pub trait Controller {
    fn command(&mut self, t: f64, state: &State) -> Result<DVector<f64>>;

    /// Called with the torque actually applied after limiting.
    fn observe(&mut self, _t: f64, _state: &State, _applied: &DVector<f64>) {}

    /// Named diagnostics for the most recent step (Lyapunov value, slack, ...).
    fn scalars(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// Power limiting applied between controller and plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limiter {
    None,
    PerJoint(PsatMode),
    /// Uniform scaling to meet the aggregate limit.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actuation {
    pub limiter: Limiter,
    /// Optional symmetric torque (current) bound applied before the power limit.
    pub torque_limit: Option<DVector<f64>>,
}

impl Actuation {
    pub fn new(limiter: Limiter) -> Self {
        Self { limiter, torque_limit: None }
    }

    pub fn with_torque_limit(mut self, limit: DVector<f64>) -> Self {
        self.torque_limit = Some(limit);
        self
    }

    pub fn apply(&self, u: &DVector<f64>, qdot: &DVector<f64>, budget: &PowerBudget) -> Result<DVector<f64>> {
        let clamped = match &self.torque_limit {
            Some(lim) => DVector::from_fn(u.len(), |i, _| u[i].clamp(-lim[i], lim[i])),
            None => u.clone(),
        };
        match self.limiter {
            Limiter::None => Ok(clamped),
            Limiter::PerJoint(mode) => psat_vector(&clamped, qdot, budget, mode),
            Limiter::Aggregate => psat_aggregate(&clamped, qdot, budget),
        }
    }
}

/// Time-indexed simulation record.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub qdot: Vec<DVector<f64>>,
    pub u_cmd: Vec<DVector<f64>>,
    pub u_applied: Vec<DVector<f64>>,
    pub power_per_joint: Vec<DVector<f64>>,
    pub power_total: Vec<f64>,
    pub scalars: BTreeMap<String, Vec<f64>>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(
        &mut self,
        t: f64,
        state: &State,
        u_cmd: DVector<f64>,
        u_applied: DVector<f64>,
        rbar: &DVector<f64>,
        scalars: &[(&str, f64)],
    ) {
        let power = DVector::from_fn(u_applied.len(), |i, _| motor_power(u_applied[i], state.qdot[i], rbar[i]));
        self.times.push(t);
        self.q.push(state.q.clone());
        self.qdot.push(state.qdot.clone());
        self.u_cmd.push(u_cmd);
        self.u_applied.push(u_applied);
        self.power_total.push(power.iter().sum());
        self.power_per_joint.push(power);
        for (name, v) in scalars {
            self.scalars.entry(name.to_string()).or_default().push(*v);
        }
    }

    pub fn joint_position(&self, i: usize) -> Vec<f64> {
        self.q.iter().map(|q| q[i]).collect()
    }

    pub fn joint_torque(&self, i: usize) -> Vec<f64> {
        self.u_applied.iter().map(|u| u[i]).collect()
    }

    pub fn scalar(&self, name: &str) -> Option<&[f64]> {
        self.scalars.get(name).map(Vec::as_slice)
    }

    pub fn final_state(&self) -> Option<State> {
        Some(State {
            q: self.q.last()?.clone(),
            qdot: self.qdot.last()?.clone(),
        })
    }

    /// Writes every `stride`-th sample (and the last) as CSV.
    pub fn write_csv(&self, path: &Path, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let n = self.q.first().map_or(0, DVector::len);
        let m = self.u_applied.first().map_or(0, DVector::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend((1..=n).map(|i| format!("qdot{i}")));
        header.extend((1..=m).map(|i| format!("u_cmd{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=m).map(|i| format!("P{i}")));
        header.push("P_total".into());
        header.extend(self.scalars.keys().cloned());
        w.write_record(&header)?;
        for k in (0..self.len()).filter(|k| k % stride == 0 || *k + 1 == self.len()) {
            let mut row = vec![self.times[k]];
            row.extend(self.q[k].iter());
            row.extend(self.qdot[k].iter());
            row.extend(self.u_cmd[k].iter());
            row.extend(self.u_applied[k].iter());
            row.extend(self.power_per_joint[k].iter());
            row.push(self.power_total[k]);
            row.extend(self.scalars.values().map(|s| s.get(k).copied().unwrap_or(f64::NAN)));
            w.write_record(row.iter().map(|v| format!("{v:.10e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rk4_step(plant: &dyn Dynamics, state: &State, u: &DVector<f64>, dt: f64) -> Result<State> {
    let f = |q: &DVector<f64>, v: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((v.clone(), plant.accel(q, v, u)?))
    };
    let (q, v) = (&state.q, &state.qdot);
    let (k1q, k1v) = f(q, v)?;
    let (k2q, k2v) = f(&(q + &k1q * (dt / 2.0)), &(v + &k1v * (dt / 2.0)))?;
    let (k3q, k3v) = f(&(q + &k2q * (dt / 2.0)), &(v + &k2v * (dt / 2.0)))?;
    let (k4q, k4v) = f(&(q + &k3q * dt), &(v + &k3v * dt))?;
    Ok(State {
        q: q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0),
        qdot: v + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0),
    })
}

/// Simulates `duration` seconds with step `dt`, logging `round(duration/dt) + 1` samples.
pub fn simulate(
    plant: &dyn Dynamics,
    controller: &mut dyn Controller,
    budget: &PowerBudget,
    actuation: &Actuation,
    x0: &State,
    duration: f64,
    dt: f64,
) -> Result<TrajectoryLog> {
    if !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidArgument(format!("dt = {dt}, duration = {duration}")));
    }
    if x0.dof() != plant.dof() || budget.len() != plant.dof() {
        return Err(Error::Dimension(format!(
            "state dof {}, plant dof {}, budget {}",
            x0.dof(),
            plant.dof(),
            budget.len()
        )));
    }
    let steps = (duration / dt).round() as usize;
    let mut log = TrajectoryLog::default();
    let mut state = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let u_cmd = controller.command(t, &state)?;
        let u = actuation.apply(&u_cmd, &state.qdot, budget)?;
        controller.observe(t, &state, &u);
        log.push(t, &state, u_cmd, u.clone(), &budget.normalized_resistance, &controller.scalars());
        if k == steps {
            break;
        }
        state = rk4_step(plant, &state, &u, dt)?;
        if state.q.iter().chain(state.qdot.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                time: t + dt,
                detail: format!("q = {:?}, qdot = {:?}", state.q.as_slice(), state.qdot.as_slice()),
            });
        }
    }
    Ok(log)
}

/// First time after which `|signal − final| ≤ pct% · |initial − final|` holds to the end.
pub fn settling_time(times: &[f64], signal: &[f64], final_value: f64, pct: f64) -> Result<Option<f64>> {
    if !(pct > 0.0 && pct < 100.0) {
        return Err(Error::InvalidArgument(format!("percentage {pct} outside (0, 100)")));
    }
    if times.len() != signal.len() || times.is_empty() {
        return Err(Error::Dimension("times and signal must be nonempty and equal".into()));
    }
    let band = pct / 100.0 * (signal[0] - final_value).abs();
    match signal.iter().rposition(|s| (s - final_value).abs() > band) {
        None => Ok(Some(times[0])),
        Some(k) if k + 1 < times.len() => Ok(Some(times[k + 1])),
        Some(_) => Ok(None),
    }
}

/// Peak overshoot beyond `final` as a percentage of the excursion, floored at 0.
pub fn percent_overshoot(signal: &[f64], initial: f64, final_value: f64) -> Result<f64> {
    let span = final_value - initial;
    if span == 0.0 {
        return Err(Error::InvalidArgument("initial and final values coincide".into()));
    }
    let peak = signal
        .iter()
        .map(|s| (s - final_value) / span)
        .fold(0.0f64, f64::max);
    Ok(100.0 * peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fin_system_model;
    use nalgebra::DMatrix;

    struct Constant(DVector<f64>);

    impl Controller for Constant {
        fn command(&mut self, _t: f64, _s: &State) -> Result<DVector<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let plant = fin_system_model();
        let budget = PowerBudget::uniform(4, 750.0, 0.0, 4.0).unwrap();
        let log = simulate(
            &plant,
            &mut Constant(DVector::zeros(4)),
            &budget,
            &Actuation::new(Limiter::PerJoint(PsatMode::ExactLossless)),
            &State::zeros(4),
            0.1,
            1e-3,
        )
        .unwrap();
        assert_eq!(log.len(), 101);
        assert!(log.q.iter().chain(log.qdot.iter()).all(|v| v.amax() == 0.0));
    }

    #[test]
    fn linear_plant_matches_matrix_exponential() {
        let plant = fin_system_model();
        let (f, h, _) = crate::model::linear_to_statespace(&plant).unwrap();
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let x0 = State::new(DVector::from_vec(vec![0.1, 0.0, -0.2, 0.3]), DVector::from_vec(vec![0.0, 1.0, 0.0, -1.0])).unwrap();
        let budget = PowerBudget::uniform(4, 1e9, 0.0, 1.0).unwrap();
        let t_end = 0.5;
        let log = simulate(&plant, &mut Constant(u.clone()), &budget, &Actuation::new(Limiter::None), &x0, t_end, 1e-4).unwrap();
        // Augmented exponential gives the exact response to a constant input.
        let mut aug = DMatrix::zeros(9, 9);
        aug.view_mut((0, 0), (8, 8)).copy_from(&f);
        aug.view_mut((0, 8), (8, 1)).copy_from(&(&h * &u));
        let e = (aug * t_end).exp();
        let mut z0 = DVector::zeros(9);
        z0.rows_mut(0, 8).copy_from(&x0.to_vector());
        z0[8] = 1.0;
        let exact = (e * z0).rows(0, 8).into_owned();
        let sim = log.final_state().unwrap().to_vector();
        assert!((exact - sim).amax() < 1e-8);
    }

    #[test]
    fn settling_of_first_order_step() {
        let dt = 1e-4;
        let times: Vec<f64> = (0..100_000).map(|k| k as f64 * dt).collect();
        let y: Vec<f64> = times.iter().map(|t| 1.0 - (-t).exp()).collect();
        let ts = settling_time(&times, &y, 1.0, 5.0).unwrap().unwrap();
        assert!((ts - 20f64.ln()).abs() < 2.0 * dt);
        let flat = vec![2.0; 10];
        assert_eq!(settling_time(&times[..10], &flat, 2.0, 5.0).unwrap(), Some(0.0));
    }

    #[test]
    fn overshoot_examples() {
        assert_eq!(percent_overshoot(&[0.0, 0.5, 1.0], 0.0, 1.0).unwrap(), 0.0);
        let sine: Vec<f64> = (0..1000).map(|k| 1.0 + 0.2 * (k as f64 * 0.01).sin()).collect();
        assert!((percent_overshoot(&sine, 0.0, 1.0).unwrap() - 20.0).abs() < 1e-3);
        assert!(percent_overshoot(&sine, 1.0, 1.0).is_err());
    }
}
