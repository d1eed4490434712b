//! Largest closed-loop bandwidth a single-DoF actuator can track under speed,
//! power or torque limits.
//!
//! Tracking `q = Ȳ cos(ω t)` with `Ȳ = Y/√2` through
//! `m q̈ = u − k q − d q̇ − τ_c sign(q̇)` needs the velocity, torque and power
//! computed by [`signals`]. The phase offset of the reference does not change
//! the maxima over a period and is ignored.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which actuator limit accompanies the speed limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthMode {
    /// Power limit `P ≤ P_max`.
    ExactPower,
    /// Torque limit `|u| ≤ u_max`.
    ApproxTorque,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandwidthProblem {
    pub m: f64,
    pub d: f64,
    pub k: f64,
    pub tau_c: f64,
    /// Command amplitude `Y` (rad).
    pub amplitude: f64,
    pub qdot_max: f64,
    pub p_max: f64,
    pub u_max: f64,
    pub mode: BandwidthMode,
}

impl BandwidthProblem {
    /// The servo of the describing-function example: `m = 1`, `d = 0.05`, no
    /// spring or Coulomb friction, `q̇_max = 4 rad/s` and `u_max = P_max / q̇_max`.
    pub fn servo(amplitude: f64, p_max: f64, mode: BandwidthMode) -> Self {
        let qdot_max = 4.0;
        Self {
            m: 1.0,
            d: 0.05,
            k: 0.0,
            tau_c: 0.0,
            amplitude,
            qdot_max,
            p_max,
            u_max: p_max / qdot_max,
            mode,
        }
    }

    pub fn with_mode(mut self, mode: BandwidthMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0.0
            && self.d >= 0.0
            && self.k >= 0.0
            && self.tau_c >= 0.0
            && self.amplitude > 0.0
            && self.qdot_max > 0.0
            && self.p_max > 0.0
            && self.u_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid bandwidth problem {self:?}")))
        }
    }

    /// Tracked amplitude `Ȳ = Y/√2`.
    pub fn tracked_amplitude(&self) -> f64 {
        self.amplitude * FRAC_1_SQRT_2
    }

    /// Velocity, torque and power at phase `θ = ω t`.
    pub fn signals(&self, omega: f64, theta: f64) -> (f64, f64, f64) {
        let (s, c) = theta.sin_cos();
        let qdot = -self.tracked_amplitude() * omega * s;
        let u = self.torque_at(omega, s, c);
        (qdot, u, u * qdot)
    }
}

/// Maxima of the signals over one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodMaxima {
    pub speed: f64,
    pub torque: f64,
    pub power: f64,
}

const GRID: usize = 2048;

/// Golden-section maximization of `f` on `[a, b]`.
fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut best = f1.max(f2);
    while b - a > 1e-13 * (1.0 + a.abs().max(b.abs())) {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
        best = best.max(f1).max(f2);
    }
    best
}

/// `(sin θ, cos θ)` on the uniform grid over `[0, 2π)`.
fn unit_grid() -> &'static [(f64, f64)] {
    static GRID_TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    GRID_TABLE.get_or_init(|| {
        (0..GRID)
            .map(|i| (2.0 * PI * i as f64 / GRID as f64).sin_cos())
            .collect()
    })
}

impl BandwidthProblem {
    fn torque_at(&self, omega: f64, s: f64, c: f64) -> f64 {
        let y = self.tracked_amplitude();
        y * ((self.k - self.m * omega * omega) * c - self.d * omega * s) - self.tau_c * sign(s)
    }
}

fn sign(s: f64) -> f64 {
    if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maximum over one period of `f(sin θ, cos θ)`: grid search on `[0, 2π)`
/// (or `[0, π)` when `half`), then golden section around the grid argmax.
fn refined_max(f: &dyn Fn(f64, f64) -> f64, half: bool) -> f64 {
    let table = unit_grid();
    let n = if half { GRID / 2 } else { GRID };
    let h = 2.0 * PI / GRID as f64;
    let (mut imax, mut vmax) = (0, f64::NEG_INFINITY);
    for (i, &(s, c)) in table[..n].iter().enumerate() {
        let v = f(s, c);
        if v > vmax {
            (imax, vmax) = (i, v);
        }
    }
    let t = imax as f64 * h;
    let g = |theta: f64| {
        let (s, c) = theta.sin_cos();
        f(s, c)
    };
    vmax.max(golden_max(&g, t - h, t + h))
}

fn max_torque(problem: &BandwidthProblem, omega: f64) -> f64 {
    refined_max(&|s, c| problem.torque_at(omega, s, c).abs(), false)
}

fn max_power(problem: &BandwidthProblem, omega: f64) -> f64 {
    let y = problem.tracked_amplitude();
    refined_max(&|s, c| problem.torque_at(omega, s, c) * (-y * omega * s), true)
}

pub fn period_maxima(problem: &BandwidthProblem, omega: f64) -> PeriodMaxima {
    PeriodMaxima {
        speed: problem.tracked_amplitude() * omega,
        torque: max_torque(problem, omega),
        power: max_power(problem, omega),
    }
}

/// Whether tracking at `ω` respects the speed limit and the mode's limit.
pub fn feasible(problem: &BandwidthProblem, omega: f64) -> bool {
    if problem.tracked_amplitude() * omega > problem.qdot_max {
        return false;
    }
    match problem.mode {
        BandwidthMode::ExactPower => max_power(problem, omega) <= problem.p_max,
        BandwidthMode::ApproxTorque => max_torque(problem, omega) <= problem.u_max,
    }
}

pub const SEARCH_LO: f64 = 1e-2;
pub const SEARCH_HI: f64 = 1e4;
const SEARCH_POINTS: usize = 200;
const BISECTION_TOL: f64 = 1e-6;

/// Largest feasible `ω_c` on a log grid over `[1e-2, 1e4]` rad/s, refined by
/// bisection on the last feasible/infeasible bracket.
///
/// The feasible grid points must form a prefix; otherwise bisection would
/// miss the true bracket and an error is returned.
pub fn max_bandwidth(problem: &BandwidthProblem) -> Result<f64> {
    problem.validate()?;
    let grid = crate::descfun::logspace(SEARCH_LO, SEARCH_HI, SEARCH_POINTS);
    let flags: Vec<bool> = grid.iter().map(|&w| feasible(problem, w)).collect();
    let Some(last) = flags.iter().rposition(|&f| f) else {
        return Err(Error::Infeasible(format!(
            "no feasible bandwidth in [{SEARCH_LO}, {SEARCH_HI}] rad/s"
        )));
    };
    if let Some(first_bad) = flags.iter().position(|&f| !f) {
        if first_bad < last {
            return Err(Error::Domain(format!(
                "feasible bandwidths are not an interval: infeasible at {} rad/s, feasible again at {} rad/s",
                grid[first_bad], grid[last]
            )));
        }
    }
    if last + 1 == grid.len() {
        return Ok(grid[last]);
    }
    let (mut lo, mut hi) = (grid[last], grid[last + 1]);
    while hi - lo > BISECTION_TOL * lo {
        let mid = 0.5 * (lo + hi);
        if feasible(problem, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioRow {
    #[serde(rename = "Y_deg")]
    pub y_deg: f64,
    #[serde(rename = "P_max")]
    pub p_max: f64,
    pub wc_exact: f64,
    pub wc_approx: f64,
    pub ratio: f64,
}

/// Exact-to-approximate bandwidth ratio over amplitudes (degrees) and power
/// limits. `template` provides the plant; its amplitude, power and torque
/// limits are overwritten per row with `u_max = P_max / q̇_max`.
pub fn ratio_sweep(
    template: &BandwidthProblem,
    y_deg: &[f64],
    p_max: &[f64],
    threads: usize,
) -> Result<Vec<RatioRow>> {
    if y_deg.is_empty() || p_max.is_empty() {
        return Err(Error::InvalidArgument("empty ratio sweep grid".into()));
    }
    let cases: Vec<(f64, f64)> = p_max
        .iter()
        .flat_map(|&p| y_deg.iter().map(move |&y| (y, p)))
        .collect();
    crate::par::try_map(&cases, threads, |&(y, p)| {
        let mut prob = *template;
        prob.amplitude = y.to_radians();
        prob.p_max = p;
        prob.u_max = p / prob.qdot_max;
        let wc_exact = max_bandwidth(&prob.with_mode(BandwidthMode::ExactPower))?;
        let wc_approx = max_bandwidth(&prob.with_mode(BandwidthMode::ApproxTorque))?;
        Ok(RatioRow {
            y_deg: y,
            p_max: p,
            wc_exact,
            wc_approx,
            ratio: wc_exact / wc_approx,
        })
    })
}

/// Indices of non-smooth points of `y(x)`, found from second differences of
/// `ln y` against `ln x`. Indices whose second difference exceeds `rel` of the
/// largest one (and an absolute floor) are grouped when adjacent; each group
/// reports its strongest index.
pub fn kinks(x: &[f64], y: &[f64], rel: f64) -> Vec<usize> {
    if x.len() < 3 || x.len() != y.len() {
        return Vec::new();
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mut d2 = vec![0.0; x.len()];
    for i in 1..x.len() - 1 {
        let s1 = (ly[i] - ly[i - 1]) / (lx[i] - lx[i - 1]);
        let s2 = (ly[i + 1] - ly[i]) / (lx[i + 1] - lx[i]);
        d2[i] = (s2 - s1).abs();
    }
    let peak = d2.iter().cloned().fold(0.0, f64::max);
    let thresh = (rel * peak).max(1e-3);
    let mut out = Vec::new();
    let mut i = 0;
    while i < d2.len() {
        if d2[i] > thresh {
            let start = i;
            while i + 1 < d2.len() && d2[i + 1] > thresh {
                i += 1;
            }
            let best = (start..=i)
                .max_by(|&a, &b| d2[a].total_cmp(&d2[b]))
                .unwrap_or(start);
            out.push(best);
        }
        i += 1;
    }
    out
}

/// Ratio sweep settings; amplitudes in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthScenario {
    pub m: f64,
    pub d: f64,
    pub k: f64,
    pub tau_c: f64,
    pub qdot_max: f64,
    pub y_min_deg: f64,
    pub y_max_deg: f64,
    pub y_count: usize,
    pub p_max: Vec<f64>,
    /// Relative threshold for [`kinks`].
    pub kink_threshold: f64,
}

impl Default for BandwidthScenario {
    fn default() -> Self {
        Self {
            m: 1.0,
            d: 0.05,
            k: 0.0,
            tau_c: 0.0,
            qdot_max: 4.0,
            y_min_deg: 0.5,
            y_max_deg: 57.3,
            y_count: 200,
            p_max: vec![200.0, 400.0, 600.0],
            kink_threshold: 0.1,
        }
    }
}

impl BandwidthScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.y_min_deg > 0.0 && self.y_max_deg >= self.y_min_deg) || self.y_count == 0 {
            return Err(Error::InvalidArgument("amplitude grid must be positive and increasing".into()));
        }
        if self.p_max.is_empty() || self.p_max.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidArgument(format!("power limits {:?} must be positive", self.p_max)));
        }
        self.template().validate()
    }

    pub fn template(&self) -> BandwidthProblem {
        let p = self.p_max.first().copied().unwrap_or(1.0);
        BandwidthProblem {
            m: self.m,
            d: self.d,
            k: self.k,
            tau_c: self.tau_c,
            amplitude: self.y_min_deg.to_radians(),
            qdot_max: self.qdot_max,
            p_max: p,
            u_max: p / self.qdot_max,
            mode: BandwidthMode::ExactPower,
        }
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        crate::descfun::logspace(self.y_min_deg, self.y_max_deg, self.y_count)
    }

    /// Rows grouped by power limit, amplitudes ascending within each group.
    pub fn run(&self, threads: usize) -> Result<Vec<RatioRow>> {
        self.validate()?;
        ratio_sweep(&self.template(), &self.amplitudes(), &self.p_max, threads)
    }

    /// Non-smooth points of each ratio curve, as amplitudes in degrees.
    pub fn kink_amplitudes(&self, rows: &[RatioRow]) -> Vec<(f64, Vec<f64>)> {
        self.p_max
            .iter()
            .map(|&p| {
                let curve: Vec<&RatioRow> = rows.iter().filter(|r| r.p_max == p).collect();
                let x: Vec<f64> = curve.iter().map(|r| r.y_deg).collect();
                let y: Vec<f64> = curve.iter().map(|r| r.ratio).collect();
                (p, kinks(&x, &y, self.kink_threshold).into_iter().map(|i| x[i]).collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(mode: BandwidthMode) -> BandwidthProblem {
        BandwidthProblem::servo(0.3, 400.0, mode)
    }

    #[test]
    fn frictionless_maxima_are_phasor_magnitudes() {
        let p = bare(BandwidthMode::ExactPower);
        let w = 37.0;
        let y = p.tracked_amplitude();
        let mx = period_maxima(&p, w);
        assert_eq!(mx.speed, y * w);
        let torque = y * ((p.m * w * w).powi(2) + (p.d * w).powi(2)).sqrt();
        assert!((mx.torque - torque).abs() < 1e-9 * torque);
        let power = 0.5 * y * y * w * (p.d * w + ((p.m * w * w).powi(2) + (p.d * w).powi(2)).sqrt());
        assert!((mx.power - power).abs() < 1e-9 * power);
    }

    #[test]
    fn coulomb_friction_draws_power() {
        let mut p = bare(BandwidthMode::ExactPower);
        p.tau_c = 2.0;
        p.m = 1e-9;
        p.d = 0.0;
        let (_, _, pw) = p.signals(10.0, 1.0);
        assert!(pw > 0.0);
    }

    #[test]
    fn speed_only_limit() {
        let mut p = bare(BandwidthMode::ExactPower);
        p.p_max = 1e12;
        let wc = max_bandwidth(&p).unwrap();
        let target = p.qdot_max / p.tracked_amplitude();
        assert!(wc <= target && wc > target * (1.0 - 2e-6));
        let mut p = bare(BandwidthMode::ApproxTorque);
        p.u_max = 1e12;
        let wc2 = max_bandwidth(&p).unwrap();
        assert_eq!(wc, wc2);
    }

    #[test]
    fn exact_beats_approximate() {
        let e = max_bandwidth(&BandwidthProblem::servo(0.05, 400.0, BandwidthMode::ExactPower)).unwrap();
        let a = max_bandwidth(&BandwidthProblem::servo(0.05, 400.0, BandwidthMode::ApproxTorque)).unwrap();
        assert!(e > a);
    }

    #[test]
    fn infeasible_everywhere() {
        let mut p = bare(BandwidthMode::ApproxTorque);
        p.tau_c = 10.0;
        p.u_max = 1.0;
        assert!(matches!(max_bandwidth(&p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn kinks_of_a_piecewise_power_law() {
        let x = crate::descfun::logspace(1.0, 100.0, 100);
        let y: Vec<f64> = x
            .iter()
            .map(|&v: &f64| if v < 10.0 { v.powf(-0.5) } else { 10f64.powf(-0.5) })
            .collect();
        let k = kinks(&x, &y, 0.1);
        assert_eq!(k.len(), 1);
        assert!((x[k[0]] - 10.0).abs() < 1.0);
    }
}
