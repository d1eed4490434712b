//! Single-axis position servo with a power-supply limit.
//!
//! A PID loop with conditional integration drives `m q̈ + d q̇ = u` at a fixed
//! control rate. Two variants differ only in the torque bound the controller
//! assumes: the exact one tracks `min(I_max k_t, P_max/|q̇|)`, the approximate
//! one uses the constant `P_max/q̇_max`. The plant side always enforces the
//! driver current and the lossless power limit.

use crate::error::{Error, Result};
use crate::model::{LinearPlant, PowerBudget, State};
use crate::powerlim::PsatMode;
use crate::sim::{percent_overshoot, settling_time, simulate, Actuation, Controller, Limiter, TrajectoryLog};
use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServoVariant {
    /// Speed-dependent bound from the exact lossless limit.
    Exact,
    /// Constant bound at the rated speed.
    Approximate,
}

impl ServoVariant {
    pub const ALL: [ServoVariant; 2] = [ServoVariant::Exact, ServoVariant::Approximate];

    pub fn label(self) -> &'static str {
        match self {
            ServoVariant::Exact => "C1",
            ServoVariant::Approximate => "C2",
        }
    }
}

impl fmt::Display for ServoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ServoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" | "exact" => Ok(ServoVariant::Exact),
            "C2" | "c2" | "approximate" => Ok(ServoVariant::Approximate),
            _ => Err(Error::InvalidArgument(format!("unknown servo variant {s:?}"))),
        }
    }
}

/// PID gains for `u = k_p e + k_i ∫e − k_d q̇` with `e = r − q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    /// Places the closed-loop poles of `1/(m s² + d s)` at the roots of
    /// `(s² + 2ζω_n s + ω_n²)(s + p)`.
    pub fn pole_placement(m: f64, d: f64, omega_n: f64, zeta: f64, p: f64) -> Result<Self> {
        if !(m > 0.0 && omega_n > 0.0 && zeta > 0.0 && p >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need m, ω_n, ζ > 0 and p ≥ 0 (m = {m}, ω_n = {omega_n}, ζ = {zeta}, p = {p})"
            )));
        }
        Ok(Self {
            kp: m * (omega_n * omega_n + 2.0 * zeta * omega_n * p),
            ki: m * omega_n * omega_n * p,
            kd: m * (2.0 * zeta * omega_n + p) - d,
        })
    }
}

/// Position command as a function of time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    Step { amplitude: f64 },
    /// Linear sweep `A sin(2π(f₀t + (f₁ − f₀)t²/2T))`.
    Chirp { amplitude: f64, f0: f64, f1: f64, duration: f64 },
}

impl Command {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Command::Step { amplitude } => amplitude,
            Command::Chirp { amplitude, f0, f1, duration } => {
                let phase = f0 * t + (f1 - f0) * t * t / (2.0 * duration);
                amplitude * (2.0 * PI * phase).sin()
            }
        }
    }
}

/// Torque bound assumed by the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueBound {
    pub variant: ServoVariant,
    /// `I_max k_t`.
    pub peak: f64,
    pub p_max: f64,
    pub qdot_max: f64,
}

impl TorqueBound {
    pub fn at(&self, qdot: f64) -> f64 {
        match self.variant {
            ServoVariant::Exact if qdot != 0.0 => self.peak.min(self.p_max / qdot.abs()),
            ServoVariant::Exact => self.peak,
            ServoVariant::Approximate => self.peak.min(self.p_max / self.qdot_max),
        }
    }
}

/// PID with conditional integration: the integrator holds while the bound
/// clips the command and the error would drive it further into the limit.
#[derive(Debug, Clone)]
pub struct ServoPid {
    pub gains: PidGains,
    pub bound: TorqueBound,
    pub command: Command,
    pub dt: f64,
    integral: f64,
    reference: f64,
    limited: bool,
}

impl ServoPid {
    pub fn new(gains: PidGains, bound: TorqueBound, command: Command, dt: f64) -> Self {
        Self {
            gains,
            bound,
            command,
            dt,
            integral: 0.0,
            reference: 0.0,
            limited: false,
        }
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }
}

impl Controller for ServoPid {
    fn command(&mut self, t: f64, state: &State) -> Result<DVector<f64>> {
        let r = self.command.at(t);
        let e = r - state.q[0];
        let g = self.gains;
        let raw = g.kp * e + g.ki * self.integral - g.kd * state.qdot[0];
        let lim = self.bound.at(state.qdot[0]);
        let u = raw.clamp(-lim, lim);
        self.limited = raw != u;
        if !(self.limited && e * raw > 0.0) {
            self.integral += e * self.dt;
        }
        self.reference = r;
        Ok(DVector::from_element(1, u))
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("r", self.reference),
            ("integral", self.integral),
            ("limited", if self.limited { 1.0 } else { 0.0 }),
        ]
    }
}

/// Servo settings; angles in degrees, frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoScenario {
    pub inertia: f64,
    pub damping: f64,
    pub i_max: f64,
    pub k_t: f64,
    pub p_max: f64,
    pub qdot_max: f64,
    pub omega_n: f64,
    pub zeta: f64,
    /// Integral pole as a fraction of `ω_n`.
    pub integral_ratio: f64,
    pub control_rate: f64,
    pub steps_deg: Vec<f64>,
    pub step_duration: f64,
    pub settle_pct: f64,
    pub chirp_amplitude_deg: f64,
    pub chirp_f0: f64,
    pub chirp_f1: f64,
    pub chirp_duration: f64,
    pub welch_segment: usize,
    /// Bins above this frequency (and inside the sweep) are compared.
    pub compare_above_hz: f64,
}

impl Default for ServoScenario {
    fn default() -> Self {
        Self {
            inertia: 1.0,
            damping: 0.05,
            i_max: 32.0,
            k_t: 6.0,
            p_max: 400.0,
            qdot_max: 4.0,
            omega_n: 50.0 * PI,
            zeta: 0.8,
            integral_ratio: 0.02,
            control_rate: 2000.0,
            steps_deg: vec![1.0, 2.0, 3.0],
            step_duration: 0.5,
            settle_pct: 5.0,
            chirp_amplitude_deg: 1.0,
            chirp_f0: 1.0,
            chirp_f1: 24.0,
            chirp_duration: 16.0,
            welch_segment: 4096,
            compare_above_hz: 10.0,
        }
    }
}

impl ServoScenario {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inertia", self.inertia),
            ("i_max", self.i_max),
            ("k_t", self.k_t),
            ("p_max", self.p_max),
            ("qdot_max", self.qdot_max),
            ("omega_n", self.omega_n),
            ("zeta", self.zeta),
            ("control_rate", self.control_rate),
            ("step_duration", self.step_duration),
            ("chirp_amplitude_deg", self.chirp_amplitude_deg),
            ("chirp_f0", self.chirp_f0),
            ("chirp_duration", self.chirp_duration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.damping >= 0.0) || !(self.integral_ratio >= 0.0) {
            return Err(Error::InvalidArgument("damping and integral_ratio must be nonnegative".into()));
        }
        if self.steps_deg.is_empty() || self.steps_deg.iter().any(|a| !(*a != 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("step amplitudes must be nonzero and finite".into()));
        }
        if !(self.settle_pct > 0.0 && self.settle_pct < 100.0) {
            return Err(Error::InvalidArgument(format!("settle_pct = {}", self.settle_pct)));
        }
        let nyquist = self.control_rate / 2.0;
        if !(self.chirp_f1 > self.chirp_f0 && self.chirp_f1 < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "chirp band [{}, {}] Hz must be increasing and below {nyquist} Hz",
                self.chirp_f0, self.chirp_f1
            )));
        }
        if self.welch_segment < 16 || self.welch_segment > self.chirp_samples() {
            return Err(Error::InvalidArgument(format!(
                "welch_segment = {} must lie in [16, {}]",
                self.welch_segment,
                self.chirp_samples()
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    fn chirp_samples(&self) -> usize {
        (self.chirp_duration * self.control_rate).round() as usize + 1
    }

    pub fn gains(&self) -> Result<PidGains> {
        PidGains::pole_placement(
            self.inertia,
            self.damping,
            self.omega_n,
            self.zeta,
            self.integral_ratio * self.omega_n,
        )
    }

    pub fn plant(&self) -> Result<LinearPlant> {
        LinearPlant::new(
            DMatrix::from_element(1, 1, self.inertia),
            DMatrix::from_element(1, 1, self.damping),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            0,
            1,
        )
    }

    /// Lossless budget; the motor losses are neglected on both sides.
    pub fn budget(&self) -> Result<PowerBudget> {
        PowerBudget::new(
            DVector::from_element(1, self.p_max),
            DVector::zeros(1),
            DVector::from_element(1, self.qdot_max),
            self.p_max,
        )
    }

    pub fn peak_torque(&self) -> f64 {
        self.i_max * self.k_t
    }

    /// Driver current clamp followed by the lossless power limit.
    pub fn actuation(&self) -> Actuation {
        Actuation::new(Limiter::PerJoint(PsatMode::ExactLossless))
            .with_torque_limit(DVector::from_element(1, self.peak_torque()))
    }

    pub fn bound(&self, variant: ServoVariant) -> TorqueBound {
        TorqueBound {
            variant,
            peak: self.peak_torque(),
            p_max: self.p_max,
            qdot_max: self.qdot_max,
        }
    }

    pub fn chirp(&self) -> Command {
        Command::Chirp {
            amplitude: self.chirp_amplitude_deg.to_radians(),
            f0: self.chirp_f0,
            f1: self.chirp_f1,
            duration: self.chirp_duration,
        }
    }

    /// Closed-loop run from rest at the origin.
    pub fn run(&self, variant: ServoVariant, command: Command, duration: f64) -> Result<TrajectoryLog> {
        let mut ctrl = ServoPid::new(self.gains()?, self.bound(variant), command, self.dt());
        let x0 = State::new(DVector::zeros(1), DVector::zeros(1))?;
        simulate(&self.plant()?, &mut ctrl, &self.budget()?, &self.actuation(), &x0, duration, self.dt())
    }
}

#[derive(Debug, Clone)]
pub struct StepRun {
    pub variant: ServoVariant,
    pub amplitude_deg: f64,
    pub settling: Option<f64>,
    pub overshoot: f64,
    pub peak_power: f64,
    pub log: TrajectoryLog,
}

pub fn run_step(s: &ServoScenario, variant: ServoVariant, amplitude_deg: f64) -> Result<StepRun> {
    let a = amplitude_deg.to_radians();
    let log = s.run(variant, Command::Step { amplitude: a }, s.step_duration)?;
    let q = log.joint_position(0);
    Ok(StepRun {
        variant,
        amplitude_deg,
        settling: settling_time(&log.times, &q, a, s.settle_pct)?,
        overshoot: percent_overshoot(&q, 0.0, a)?,
        peak_power: log.power_total.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        log,
    })
}

/// One bin of an estimated frequency response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrfBin {
    pub frequency: f64,
    pub magnitude: f64,
    pub phase: f64,
    pub coherence: f64,
}

/// Welch estimate `H = P_xy / P_xx` with Hann windows and 50% overlap.
pub fn welch_frf(x: &[f64], y: &[f64], fs: f64, segment: usize) -> Result<Vec<FrfBin>> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("input {} vs output {}", x.len(), y.len())));
    }
    if segment < 2 || segment > x.len() || !(fs > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "segment {segment} for {} samples at {fs} Hz",
            x.len()
        )));
    }
    let window: Vec<f64> = (0..segment)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / segment as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(segment);
    let bins = segment / 2 + 1;
    let mut pxx = vec![0.0; bins];
    let mut pyy = vec![0.0; bins];
    let mut pxy = vec![Complex::new(0.0, 0.0); bins];
    let hop = segment / 2;
    let mut start = 0;
    while start + segment <= x.len() {
        let spectrum = |s: &[f64]| {
            let mut buf: Vec<Complex<f64>> = s
                .iter()
                .zip(&window)
                .map(|(v, w)| Complex::new(v * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf
        };
        let fx = spectrum(&x[start..start + segment]);
        let fy = spectrum(&y[start..start + segment]);
        for k in 0..bins {
            pxx[k] += fx[k].norm_sqr();
            pyy[k] += fy[k].norm_sqr();
            pxy[k] += fx[k].conj() * fy[k];
        }
        start += hop;
    }
    Ok((0..bins)
        .map(|k| {
            let h = if pxx[k] > 0.0 { pxy[k] / pxx[k] } else { Complex::new(0.0, 0.0) };
            let denom = pxx[k] * pyy[k];
            FrfBin {
                frequency: k as f64 * fs / segment as f64,
                magnitude: h.norm(),
                phase: h.arg(),
                coherence: if denom > 0.0 { pxy[k].norm_sqr() / denom } else { 0.0 },
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ChirpRun {
    pub variant: ServoVariant,
    pub frf: Vec<FrfBin>,
    pub peak_power: f64,
    pub log: TrajectoryLog,
}

pub fn run_chirp(s: &ServoScenario, variant: ServoVariant) -> Result<ChirpRun> {
    let log = s.run(variant, s.chirp(), s.chirp_duration)?;
    let r = log.scalar("r").ok_or_else(|| Error::Domain("reference not logged".into()))?;
    let frf = welch_frf(r, &log.joint_position(0), s.control_rate, s.welch_segment)?;
    Ok(ChirpRun {
        variant,
        frf,
        peak_power: log.power_total.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        log,
    })
}

/// Step and chirp runs for both variants.
#[derive(Debug, Clone)]
pub struct ServoResults {
    /// Ordered by amplitude, then variant (exact first).
    pub steps: Vec<StepRun>,
    pub chirps: Vec<ChirpRun>,
}

impl ServoResults {
    pub fn step(&self, variant: ServoVariant, amplitude_deg: f64) -> Option<&StepRun> {
        self.steps
            .iter()
            .find(|r| r.variant == variant && r.amplitude_deg == amplitude_deg)
    }

    pub fn chirp(&self, variant: ServoVariant) -> Option<&ChirpRun> {
        self.chirps.iter().find(|r| r.variant == variant)
    }

    pub fn peak_power(&self) -> f64 {
        self.steps
            .iter()
            .map(|r| r.peak_power)
            .chain(self.chirps.iter().map(|r| r.peak_power))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact minus approximate magnitude over `(above, f₁]`; the smallest value and its bin.
    pub fn magnitude_margin(&self, above: f64, f1: f64) -> Option<(f64, f64)> {
        let (e, a) = (self.chirp(ServoVariant::Exact)?, self.chirp(ServoVariant::Approximate)?);
        e.frf
            .iter()
            .zip(&a.frf)
            .filter(|(b, _)| b.frequency > above && b.frequency <= f1)
            .map(|(b, c)| (b.magnitude - c.magnitude, b.frequency))
            .min_by(|x, y| x.0.total_cmp(&y.0))
    }
}

/// Step ordering, chirp magnitude and power figures of one servo study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServoCheck {
    pub amplitudes_deg: Vec<f64>,
    pub settling_exact: Vec<Option<f64>>,
    pub settling_approx: Vec<Option<f64>>,
    pub overshoot_exact: Vec<f64>,
    pub overshoot_approx: Vec<f64>,
    /// Approximate minus exact settling time per amplitude.
    pub gaps: Vec<Option<f64>>,
    pub exact_not_slower: bool,
    pub gap_increasing: bool,
    /// At the largest amplitude.
    pub approx_overshoots_more: bool,
    /// Smallest exact-minus-approximate magnitude above the threshold, and its bin.
    pub magnitude_margin: Option<(f64, f64)>,
    pub peak_power: f64,
    pub power_ok: bool,
}

impl ServoCheck {
    pub fn magnitude_ok(&self) -> bool {
        self.magnitude_margin.is_some_and(|(m, _)| m >= 0.0)
    }

    pub fn passed(&self) -> bool {
        self.exact_not_slower && self.gap_increasing && self.magnitude_ok() && self.power_ok
    }
}

impl ServoResults {
    /// Evaluates the comparison with amplitudes sorted by magnitude.
    pub fn check(&self, s: &ServoScenario) -> Result<ServoCheck> {
        let mut amplitudes = s.steps_deg.clone();
        amplitudes.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        let pick = |v: ServoVariant, a: f64| {
            self.step(v, a)
                .ok_or_else(|| Error::Domain(format!("missing {v} step at {a}°")))
        };
        let mut c = ServoCheck {
            amplitudes_deg: amplitudes.clone(),
            settling_exact: Vec::new(),
            settling_approx: Vec::new(),
            overshoot_exact: Vec::new(),
            overshoot_approx: Vec::new(),
            gaps: Vec::new(),
            exact_not_slower: true,
            gap_increasing: true,
            approx_overshoots_more: false,
            magnitude_margin: self.magnitude_margin(s.compare_above_hz, s.chirp_f1),
            peak_power: self.peak_power(),
            power_ok: self.peak_power() <= s.p_max + 1e-6,
        };
        for &a in &amplitudes {
            let (e, p) = (pick(ServoVariant::Exact, a)?, pick(ServoVariant::Approximate, a)?);
            c.settling_exact.push(e.settling);
            c.settling_approx.push(p.settling);
            c.overshoot_exact.push(e.overshoot);
            c.overshoot_approx.push(p.overshoot);
            c.gaps.push(e.settling.zip(p.settling).map(|(e, p)| p - e));
        }
        c.exact_not_slower = c.gaps.iter().all(|g| g.is_some_and(|g| g >= 0.0));
        c.gap_increasing = c.exact_not_slower && c.gaps.windows(2).all(|w| w[1] > w[0]);
        c.approx_overshoots_more = match (c.overshoot_exact.last(), c.overshoot_approx.last()) {
            (Some(e), Some(p)) => p > e,
            _ => false,
        };
        Ok(c)
    }
}

enum Job {
    Step(ServoVariant, f64),
    Chirp(ServoVariant),
}

enum Outcome {
    Step(StepRun),
    Chirp(ChirpRun),
}

pub fn run_servo(s: &ServoScenario, threads: usize) -> Result<ServoResults> {
    s.validate()?;
    let mut jobs = Vec::new();
    for &a in &s.steps_deg {
        for v in ServoVariant::ALL {
            jobs.push(Job::Step(v, a));
        }
    }
    for v in ServoVariant::ALL {
        jobs.push(Job::Chirp(v));
    }
    let outcomes = crate::par::try_map(&jobs, threads, |j| match *j {
        Job::Step(v, a) => run_step(s, v, a).map(Outcome::Step),
        Job::Chirp(v) => run_chirp(s, v).map(Outcome::Chirp),
    })?;
    let mut out = ServoResults {
        steps: Vec::new(),
        chirps: Vec::new(),
    };
    for o in outcomes {
        match o {
            Outcome::Step(r) => out.steps.push(r),
            Outcome::Chirp(r) => out.chirps.push(r),
        }
    }
    Ok(out)
}
