//! Describing function of the power-limit nonlinearity in cascade with a
//! single-DoF plant.
//!
//! The torque input is `u = A sin ψ` and the velocity is `q̇ = A X sin(ψ + φ)`,
//! where `X ∠ φ` is the cascade gain `G(jω) N(A, ω)`. Since the cascade depends
//! on `N` itself, the describing function is the fixed point of the map
//! `N ↦ fourier_coeffs(A, X_G |N|, φ_G + arg N)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::powerlim::{psat, JointLimit, PsatMode};

/// Frequency response of the torque-to-velocity plant.
pub struct PlantFR {
    magnitude_fn: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    phase_fn: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl PlantFR {
    pub fn new(
        magnitude_fn: impl Fn(f64) -> f64 + Send + Sync + 'static,
        phase_fn: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            magnitude_fn: Box::new(magnitude_fn),
            phase_fn: Box::new(phase_fn),
        }
    }

    /// `G(s) = 1 / (m s + d)`.
    pub fn mass_damper(m: f64, d: f64) -> Result<Self> {
        if !(m > 0.0) || !(d >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mass-damper plant needs m > 0 and d >= 0 (m = {m}, d = {d})"
            )));
        }
        Ok(Self::new(
            move |w| 1.0 / (d * d + (m * w) * (m * w)).sqrt(),
            move |w| -(m * w).atan2(d),
        ))
    }

    pub fn magnitude(&self, omega: f64) -> f64 {
        (self.magnitude_fn)(omega)
    }

    pub fn phase(&self, omega: f64) -> f64 {
        (self.phase_fn)(omega)
    }

    pub fn response(&self, omega: f64) -> Complex<f64> {
        Complex::from_polar(self.magnitude(omega), self.phase(omega))
    }
}

/// A converged describing-function evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct DFPoint {
    pub amplitude: f64,
    pub omega: f64,
    pub gain: f64,
    pub phase: f64,
    /// Active window `(ψ_l, ψ_u)` at the converged cascade gain.
    pub window: Option<(f64, f64)>,
    pub iterations: usize,
    pub residual: f64,
    /// Fixed-point residual after every iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl DFPoint {
    pub fn value(&self) -> Complex<f64> {
        Complex::from_polar(self.gain, self.phase)
    }
}

/// Wraps an angle into `(-π, π]`.
fn wrap_angle(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Required power at scaled time `ψ`.
pub fn required_power(a: f64, x: f64, phi: f64, psi: f64) -> f64 {
    0.5 * a * a * x * (phi.cos() - (2.0 * psi + phi).cos())
}

/// Interval of `ψ ∈ [0, π]` on which the required power exceeds `p_max`.
///
/// The second half-period `[ψ_l + π, ψ_u + π]` carries the same window since
/// torque and velocity both flip sign there.
pub fn active_window(a: f64, x: f64, phi: f64, p_max: f64) -> Result<Option<(f64, f64)>> {
    if !(a > 0.0) || !(x > 0.0) || !phi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "active window needs A > 0, X > 0 and finite φ (A = {a}, X = {x}, φ = {phi})"
        )));
    }
    if !(p_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative power limit {p_max}")));
    }
    let phi = wrap_angle(phi);
    let peak = 0.5 * a * a * x * (phi.cos() + 1.0);
    if peak <= p_max {
        return Ok(None);
    }
    let c = phi.cos() - 2.0 * p_max / (a * a * x);
    if c < -1.0 - 1e-12 || c > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("arccos argument {c} out of range")));
    }
    let alpha = c.clamp(-1.0, 1.0).acos();
    // Candidates from both branches and their π shifts; keep the pair inside
    // [0, π] whose midpoint has P > p_max.
    let base = [(alpha - phi) / 2.0, (2.0 * PI - alpha - phi) / 2.0];
    let mut best: Option<(f64, f64)> = None;
    for k in -2..=2 {
        let shift = k as f64 * PI;
        let (lo, hi) = (base[0] + shift, base[1] + shift);
        let tol = 1e-12;
        if lo < -tol || hi > PI + tol || hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        if required_power(a, x, phi, mid) > p_max {
            best = Some((lo.max(0.0), hi.min(PI)));
            break;
        }
    }
    match best {
        Some((lo, hi)) if hi > lo => Ok(Some((lo, hi))),
        Some(_) => Ok(None),
        None => Err(Error::Domain(format!(
            "no admissible window for A = {a}, X = {x}, φ = {phi}"
        ))),
    }
}

/// Closed-form first-harmonic coefficients `(c_N, s_N)`.
pub fn fourier_coeffs(a: f64, x: f64, phi: f64, p_max: f64) -> Result<(f64, f64)> {
    let Some((lo, hi)) = active_window(a, x, phi, p_max)? else {
        return Ok((1.0, 0.0));
    };
    let phi = wrap_angle(phi);
    let (sl, su) = ((lo + phi).sin(), (hi + phi).sin());
    if sl <= 0.0 || su <= 0.0 {
        return Err(Error::Domain(format!(
            "velocity changes sign inside the active window (sin = {sl}, {su})"
        )));
    }
    let dpsi = hi - lo;
    let l = (su / sl).ln();
    let (sp, cp) = phi.sin_cos();
    let y_n = dpsi * cp - l * sp;
    let z_n = dpsi * sp + l * cp;
    let k = 2.0 * p_max / (PI * a * a * x);
    let c_n = k * y_n + (2.0 * (PI - dpsi) + (2.0 * hi).sin() - (2.0 * lo).sin()) / (2.0 * PI);
    let s_n = k * z_n + ((2.0 * hi).cos() - (2.0 * lo).cos()) / (2.0 * PI);
    Ok((c_n, s_n))
}

/// First-harmonic coefficients by brute-force quadrature of the limited torque
/// over one period (`n` uniform points, periodic trapezoid rule).
pub fn fourier_quadrature(a: f64, x: f64, phi: f64, p_max: f64, n: usize) -> Result<(f64, f64)> {
    if n < 4 {
        return Err(Error::InvalidArgument("quadrature needs at least 4 points".into()));
    }
    let limit = JointLimit::lossless(p_max);
    let h = 2.0 * PI / n as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for i in 0..n {
        let psi = i as f64 * h;
        let u = a * psi.sin();
        let v = a * x * (psi + phi).sin();
        let y = psat(u, v, &limit, PsatMode::ExactLossless)?;
        c += y * psi.sin();
        s += y * psi.cos();
    }
    Ok((c * h / (PI * a), s * h / (PI * a)))
}

/// Settings of the fixed-point solve.
#[derive(Debug, Clone, Copy)]
pub struct DfOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Iterations without halving the residual before switching to Newton.
    pub stall_window: usize,
}

impl Default for DfOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iter: 200,
            damping: 0.5,
            stall_window: 20,
        }
    }
}

fn df_map(a: f64, omega: f64, plant: &PlantFR, p_max: f64, n: Complex<f64>) -> Result<Complex<f64>> {
    let x = plant.magnitude(omega) * n.norm();
    let phi = plant.phase(omega) + n.arg();
    let (c, s) = fourier_coeffs(a, x, phi, p_max)?;
    Ok(Complex::new(c, s))
}

/// Describing function at `(A, ω)` with default solver settings.
pub fn describing_function(a: f64, omega: f64, plant: &PlantFR, p_max: f64) -> Result<DFPoint> {
    describing_function_with(a, omega, plant, p_max, &DfOptions::default())
}

pub fn describing_function_with(
    a: f64,
    omega: f64,
    plant: &PlantFR,
    p_max: f64,
    opts: &DfOptions,
) -> Result<DFPoint> {
    if !(a > 0.0) || !(omega > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "describing function needs A > 0 and ω > 0 (A = {a}, ω = {omega})"
        )));
    }
    let xg = plant.magnitude(omega);
    if !(xg > 0.0) || !xg.is_finite() {
        return Err(Error::Domain(format!("plant magnitude {xg} at ω = {omega}")));
    }
    let map = |n: Complex<f64>| df_map(a, omega, plant, p_max, n);

    let mut n = Complex::new(1.0, 0.0);
    let mut history = Vec::new();
    let mut residual = (map(n)? - n).norm();
    let mut newton = false;
    let mut iterations = 0;
    while residual >= opts.tolerance {
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations, residual });
        }
        iterations += 1;
        let w = opts.stall_window;
        if !newton && history.len() > w && history[history.len() - 1] > 0.5 * history[history.len() - 1 - w] {
            newton = true;
        }
        if !newton {
            match picard_step(&map, n, residual, opts.damping)? {
                Some((next, r)) => {
                    n = next;
                    residual = r;
                }
                None => newton = true,
            }
        }
        if newton {
            n = newton_step(&map, n, residual)?;
            residual = (map(n)? - n).norm();
        }
        history.push(residual);
    }

    let x = xg * n.norm();
    let phi = plant.phase(omega) + n.arg();
    Ok(DFPoint {
        amplitude: a,
        omega,
        gain: n.norm(),
        phase: n.arg(),
        window: active_window(a, x, phi, p_max)?,
        iterations,
        residual,
        history,
    })
}

/// Damped Picard step `N + β (F(N) − N)`, halving `β` until the residual
/// decreases. For a contraction the Picard direction is a descent direction of
/// the residual norm, so this only fails near round-off.
fn picard_step(
    map: &dyn Fn(Complex<f64>) -> Result<Complex<f64>>,
    n: Complex<f64>,
    residual: f64,
    damping: f64,
) -> Result<Option<(Complex<f64>, f64)>> {
    let d = map(n)? - n;
    let mut beta = damping;
    for _ in 0..20 {
        let cand = n + d * beta;
        let r = (map(cand)? - cand).norm();
        if r < residual {
            return Ok(Some((cand, r)));
        }
        beta *= 0.5;
    }
    Ok(None)
}

/// One backtracking Newton step on `F(N) − N = 0` with a forward-difference
/// Jacobian in the (Re, Im) coordinates.
fn newton_step(
    map: &dyn Fn(Complex<f64>) -> Result<Complex<f64>>,
    n: Complex<f64>,
    residual: f64,
) -> Result<Complex<f64>> {
    let r = |z: Complex<f64>| -> Result<Complex<f64>> { Ok(map(z)? - z) };
    let r0 = r(n)?;
    let h = 1e-7 * (1.0 + n.norm());
    let dr = (r(n + Complex::new(h, 0.0))? - r0) / h;
    let di = (r(n + Complex::new(0.0, h))? - r0) / h;
    let j = nalgebra::Matrix2::new(dr.re, di.re, dr.im, di.im);
    let Some(jinv) = j.try_inverse() else {
        return Err(Error::Singular("describing-function Newton Jacobian".into()));
    };
    let step = jinv * nalgebra::Vector2::new(-r0.re, -r0.im);
    let mut t = 1.0;
    for _ in 0..30 {
        let cand = n + Complex::new(step[0], step[1]) * t;
        if cand.norm() > 0.0 {
            if let Ok(rc) = r(cand) {
                if rc.norm() < residual {
                    return Ok(cand);
                }
            }
        }
        t *= 0.5;
    }
    Err(Error::NoConvergence { iterations: 0, residual })
}

/// Describing function of a symmetric torque saturation (purely real).
pub fn df_sat(a: f64, u_max: f64) -> Result<f64> {
    if !(a > 0.0) || !(u_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "saturation describing function needs A, u_max > 0 (A = {a}, u_max = {u_max})"
        )));
    }
    if a <= u_max {
        return Ok(1.0);
    }
    let r = u_max / a;
    Ok((2.0 / PI) * (r.asin() + r * (1.0 - r * r).sqrt()))
}

/// PD position controller `u = K_p (q_d − q) − K_d q̇`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl PdGains {
    /// Gains placing the closed loop of `1/(m s² + d s)` at `ω_n`, `ζ`.
    pub fn second_order(m: f64, d: f64, omega_n: f64, zeta: f64) -> Self {
        Self {
            kp: m * omega_n * omega_n,
            kd: 2.0 * zeta * omega_n * m - d,
        }
    }

    /// Controller frequency response from position error to torque.
    pub fn response(&self, omega: f64) -> Complex<f64> {
        Complex::new(self.kp, self.kd * omega)
    }
}

/// One row of a Nyquist table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NyquistRow {
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub omega: f64,
    pub re: f64,
    pub im: f64,
}

impl NyquistRow {
    fn new(amplitude: f64, omega: f64, z: Complex<f64>) -> Self {
        Self { amplitude, omega, re: z.re, im: z.im }
    }
}

/// Open-loop curves with and without the describing function.
#[derive(Debug, Clone, Default)]
pub struct NyquistTables {
    /// `C(jω) G(jω) / (jω)` (repeated per amplitude).
    pub open_loop: Vec<NyquistRow>,
    /// `N(A, ω)`.
    pub describing: Vec<NyquistRow>,
    /// `C(jω) G(jω) N(A, ω) / (jω)`.
    pub open_loop_df: Vec<NyquistRow>,
    pub points: Vec<DFPoint>,
}

/// Evaluates the describing function over an amplitude/frequency grid.
///
/// Points are independent; with `threads > 1` they are split across scoped
/// worker threads and reassembled in grid order.
pub fn nyquist_sweep(
    controller: &PdGains,
    plant: &PlantFR,
    p_max: f64,
    amplitudes: &[f64],
    omegas: &[f64],
    threads: usize,
) -> Result<NyquistTables> {
    if amplitudes.is_empty() || omegas.is_empty() {
        return Err(Error::InvalidArgument("empty Nyquist grid".into()));
    }
    let grid: Vec<(f64, f64)> = amplitudes
        .iter()
        .flat_map(|&a| omegas.iter().map(move |&w| (a, w)))
        .collect();
    let points = crate::par::try_map(&grid, threads, |&(a, w)| {
        describing_function(a, w, plant, p_max)
    })?;

    let mut tables = NyquistTables::default();
    for p in points {
        let (a, w) = (p.amplitude, p.omega);
        let l = controller.response(w) * plant.response(w) / Complex::new(0.0, w);
        let n = p.value();
        tables.open_loop.push(NyquistRow::new(a, w, l));
        tables.describing.push(NyquistRow::new(a, w, n));
        tables.open_loop_df.push(NyquistRow::new(a, w, l * n));
        tables.points.push(p);
    }
    Ok(tables)
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

/// Peak power of the first-harmonic torque `A (c_N sin ψ + s_N cos ψ)` against
/// the velocity `A X_G X_N sin(ψ + φ_G + φ_N)`.
pub fn first_harmonic_peak_power(p: &DFPoint, plant: &PlantFR) -> f64 {
    let a = p.amplitude;
    let x = plant.magnitude(p.omega) * p.gain;
    let phi = plant.phase(p.omega) + p.phase;
    // u₁ q̇ = A² X X_N sin(ψ+φ_N) sin(ψ+φ) whose peak is A² X X_N (1 + cos(φ − φ_N)) / 2.
    0.5 * a * a * x * p.gain * (1.0 + (phi - p.phase).cos())
}

/// The phase `φ_N` lies in `[0, π/2)` when the plant phase is in `(−π/2, 0]`.
pub fn phase_in_lead_range(phase: f64) -> bool {
    (0.0..FRAC_PI_2).contains(&phase)
}

/// Describing-function study of the PD-controlled servo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescfunScenario {
    pub m: f64,
    pub d: f64,
    pub omega_n: f64,
    pub zeta: f64,
    pub p_max: f64,
    /// Rated speed defining the saturation bound `P_max / q̇_max`.
    pub qdot_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub amplitude_count: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub omega_count: usize,
}

impl Default for DescfunScenario {
    fn default() -> Self {
        Self {
            m: 1.0,
            d: 0.05,
            omega_n: 50.0 * PI,
            zeta: 0.8,
            p_max: 400.0,
            qdot_max: 4.0,
            amplitude_min: 1.0,
            amplitude_max: 500.0,
            amplitude_count: 50,
            omega_min: 1.0,
            omega_max: 1000.0,
            omega_count: 100,
        }
    }
}

/// Nyquist data for the exact limit plus the saturation comparison.
#[derive(Debug, Clone)]
pub struct DescfunResults {
    pub tables: NyquistTables,
    /// `N_sat(A)` per grid point (real).
    pub saturation: Vec<NyquistRow>,
    /// `C(jω) G(jω) N_sat(A) / (jω)`.
    pub open_loop_sat: Vec<NyquistRow>,
}

impl DescfunScenario {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0.0
            && self.d >= 0.0
            && self.omega_n > 0.0
            && self.zeta > 0.0
            && self.p_max > 0.0
            && self.qdot_max > 0.0
            && self.amplitude_min > 0.0
            && self.amplitude_max >= self.amplitude_min
            && self.omega_min > 0.0
            && self.omega_max >= self.omega_min
            && self.amplitude_count > 0
            && self.omega_count > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid describing-function settings {self:?}")))
        }
    }

    pub fn plant(&self) -> Result<PlantFR> {
        PlantFR::mass_damper(self.m, self.d)
    }

    pub fn controller(&self) -> PdGains {
        PdGains::second_order(self.m, self.d, self.omega_n, self.zeta)
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        logspace(self.amplitude_min, self.amplitude_max, self.amplitude_count)
    }

    pub fn omegas(&self) -> Vec<f64> {
        logspace(self.omega_min, self.omega_max, self.omega_count)
    }

    pub fn run(&self, threads: usize) -> Result<DescfunResults> {
        self.validate()?;
        let plant = self.plant()?;
        let tables = nyquist_sweep(&self.controller(), &plant, self.p_max, &self.amplitudes(), &self.omegas(), threads)?;
        let u_max = self.p_max / self.qdot_max;
        let mut saturation = Vec::with_capacity(tables.points.len());
        let mut open_loop_sat = Vec::with_capacity(tables.points.len());
        for (p, l) in tables.points.iter().zip(&tables.open_loop) {
            let n = df_sat(p.amplitude, u_max)?;
            saturation.push(NyquistRow::new(p.amplitude, p.omega, Complex::new(n, 0.0)));
            open_loop_sat.push(NyquistRow::new(p.amplitude, p.omega, Complex::new(l.re * n, l.im * n)));
        }
        Ok(DescfunResults {
            tables,
            saturation,
            open_loop_sat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_plant() -> PlantFR {
        PlantFR::mass_damper(1.0, 0.05).unwrap()
    }

    #[test]
    fn inactive_window_and_unit_gain() {
        assert_eq!(active_window(1.0, 1.0, 0.0, 400.0).unwrap(), None);
        assert_eq!(fourier_coeffs(1.0, 1.0, 0.0, 400.0).unwrap(), (1.0, 0.0));
        let p = describing_function(1.0, 10.0, &example_plant(), 400.0).unwrap();
        assert_eq!((p.gain, p.phase, p.iterations), (1.0, 0.0, 0));
    }

    #[test]
    fn window_endpoints_hit_the_limit() {
        let plant = example_plant();
        let w = 50.0 * PI;
        let (x, phi) = (plant.magnitude(w), plant.phase(w));
        let (lo, hi) = active_window(500.0, x, phi, 400.0).unwrap().unwrap();
        assert!(0.0 <= lo && lo < hi && hi <= PI);
        for psi in [lo, hi] {
            assert!((required_power(500.0, x, phi, psi) - 400.0).abs() < 1e-8);
        }
    }

    #[test]
    fn tangent_window_is_inactive() {
        let (a, phi) = (2.0, 0.3_f64);
        let x = 2.0 * 5.0 / (a * a * (phi.cos() + 1.0));
        assert_eq!(active_window(a, x, phi, 5.0).unwrap(), None);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for &(a, x, phi, p) in &[(10.0, 1.0, -0.4, 20.0), (500.0, 0.005, -1.5, 400.0), (3.0, 2.0, 0.7, 1.0)] {
            let cf = fourier_coeffs(a, x, phi, p).unwrap();
            let q = fourier_quadrature(a, x, phi, p, 10_000).unwrap();
            assert!((cf.0 - q.0).abs() < 1e-6 && (cf.1 - q.1).abs() < 1e-6, "{cf:?} vs {q:?}");
        }
    }

    #[test]
    fn vanishing_window_is_continuous() {
        let (a, phi) = (2.0, -0.3_f64);
        let p = 5.0;
        let x0 = 2.0 * p / (a * a * (phi.cos() + 1.0));
        // Pick X so that Δψ = 1e-4.
        let target = 1e-4;
        let c = (PI - target).cos();
        let x = 2.0 * p / (a * a * (phi.cos() - c));
        assert!(x > x0);
        let (lo, hi) = active_window(a, x, phi, p).unwrap().unwrap();
        assert!(((hi - lo) - target).abs() < 1e-9);
        let (cn, sn) = fourier_coeffs(a, x, phi, p).unwrap();
        assert!((cn - 1.0).abs() < 1e-8 && sn.abs() < 1e-8);
    }

    #[test]
    fn converged_point_matches_time_domain() {
        let plant = example_plant();
        let p = describing_function(200.0, 20.0, &plant, 400.0).unwrap();
        assert!(p.window.is_some() && p.residual < 1e-10);
        let x = plant.magnitude(p.omega) * p.gain;
        let phi = plant.phase(p.omega) + p.phase;
        let q = fourier_quadrature(p.amplitude, x, phi, 400.0, 10_000).unwrap();
        let n = p.value();
        assert!((n.re - q.0).abs() < 1e-4 && (n.im - q.1).abs() < 1e-4);
        assert!(p.gain > 0.0 && p.gain <= 1.0 && phase_in_lead_range(p.phase));
    }

    #[test]
    fn saturation_describing_function() {
        assert_eq!(df_sat(1.0, 2.0).unwrap(), 1.0);
        assert!(df_sat(1e9, 1.0).unwrap() < 1e-8);
        let (a, um) = (2.0, 1.0);
        let n = 200_000;
        let h = 2.0 * PI / n as f64;
        let b: f64 = (0..n)
            .map(|i| {
                let s = (i as f64 * h).sin();
                (a * s).clamp(-um, um) * s
            })
            .sum::<f64>()
            * h
            / (PI * a);
        assert!((df_sat(a, um).unwrap() - b).abs() < 1e-8);
    }

    #[test]
    fn logspace_endpoints() {
        let g = logspace(1.0, 1000.0, 4);
        assert!((g[1] - 10.0).abs() < 1e-12 && (g[3] - 1000.0).abs() < 1e-9);
    }
}
