//! Scenario checks with measured values, shared by the command line and the
//! acceptance harness.
//!
//! A check marked `invariant` guards a physical or numerical guarantee (power
//! within budget, solver accuracy); the others compare controllers.

use crate::bandwidth::{BandwidthScenario, RatioRow};
use crate::clfqp::{run_clf_example, ClfRun, ClfScenario, ClfVariant};
use crate::descfun::{fourier_coeffs, fourier_quadrature, DescfunResults, DescfunScenario};
use crate::error::Result;
use crate::mpc::{power_constraint_terms, stage_power, FinExample, FinRun, Horizon, HorizonMatrices};
use crate::nlcontrol::{run_pbc, PbcScenario};
use crate::servo::{run_servo, ServoResults, ServoScenario};
use crate::sim::TrajectoryLog;
use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub invariant: bool,
    pub measured: Value,
}

impl Check {
    fn claim(name: &str, passed: bool, measured: Value) -> Self {
        Self {
            name: name.into(),
            passed,
            invariant: false,
            measured,
        }
    }

    fn invariant(name: &str, passed: bool, measured: Value) -> Self {
        Self {
            invariant: true,
            ..Self::claim(name, passed, measured)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(scenario: &str, checks: Vec<Check>) -> Self {
        Self {
            scenario: scenario.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    /// A report holding one failed `config` check.
    pub fn invalid(scenario: &str, error: &crate::Error) -> Self {
        Self::new(
            scenario,
            vec![Check::invariant("config", false, json!({ "error": error.to_string() }))],
        )
    }

    pub fn invariants_hold(&self) -> bool {
        self.checks.iter().filter(|c| c.invariant).all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs `f` unless validation fails, in which case the failure is the report.
fn guarded(scenario: &str, validate: Result<()>, f: impl FnOnce() -> Result<Report>) -> Report {
    match validate.and_then(|_| f()) {
        Ok(r) => r,
        Err(e) => Report::invalid(scenario, &e),
    }
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------- descfun

pub fn check_descfun(results: &DescfunResults) -> Vec<Check> {
    let pts = &results.tables.points;
    let converged: Vec<_> = pts.iter().filter(|p| p.residual <= 1e-10).collect();
    let active: Vec<_> = converged.iter().filter(|p| p.window.is_some()).collect();
    let min_gain = min_of(converged.iter().map(|p| p.gain));
    let max_gain = max_of(converged.iter().map(|p| p.gain));
    let min_phase = min_of(converged.iter().map(|p| p.phase));
    let min_active_phase = min_of(active.iter().map(|p| p.phase));
    vec![
        Check::claim(
            "attenuating describing function",
            !converged.is_empty() && min_gain > 0.0 && max_gain <= 1.0 && min_phase >= 0.0,
            json!({
                "points": pts.len(),
                "converged": converged.len(),
                "active": active.len(),
                "min_gain": min_gain,
                "max_gain": max_gain,
                "min_phase": min_phase,
            }),
        ),
        Check::claim(
            "exact phase at least saturation phase",
            active.iter().all(|p| p.phase >= 0.0),
            json!({ "active": active.len(), "min_active_phase": min_active_phase, "saturation_phase": 0.0 }),
        ),
    ]
}

/// Closed-form Fourier coefficients against quadrature on random active windows.
pub fn check_fourier_oracle(samples: usize, seed: u64) -> Result<Check> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (mut worst_c, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let a = rng.gen_range(0.5..500.0);
        let x = rng.gen_range(1e-3..2.0);
        let phi: f64 = rng.gen_range(-1.5..1.5);
        // Below the peak demand A²X(1 + cos φ)/2 the window is active.
        let p_max = rng.gen_range(0.01..0.99) * 0.5 * a * a * x * (phi.cos() + 1.0);
        let (c, s) = fourier_coeffs(a, x, phi, p_max)?;
        let (cq, sq) = fourier_quadrature(a, x, phi, p_max, 10_000)?;
        worst_c = worst_c.max((c - cq).abs());
        worst_s = worst_s.max((s - sq).abs());
    }
    Ok(Check::invariant(
        "closed form matches quadrature",
        worst_c <= 1e-6 && worst_s <= 1e-6,
        json!({ "samples": samples, "seed": seed, "max_err_c": worst_c, "max_err_s": worst_s, "tolerance": 1e-6 }),
    ))
}

pub fn verify_descfun(s: &DescfunScenario, threads: usize, seed: u64) -> Report {
    guarded("descfun", s.validate(), || {
        let mut checks = check_descfun(&s.run(threads)?);
        checks.push(check_fourier_oracle(200, seed)?);
        Ok(Report::new("descfun", checks))
    })
}

// ---------------------------------------------------------------- bandwidth

pub fn check_bandwidth(s: &BandwidthScenario, rows: &[RatioRow]) -> Vec<Check> {
    let min_ratio = min_of(rows.iter().map(|r| r.ratio));
    let curve = |p: f64| rows.iter().filter(move |r| r.p_max == p);
    let top: Vec<Value> = s
        .p_max
        .iter()
        .filter_map(|&p| curve(p).next_back().map(|r| json!({ "p_max": p, "y_deg": r.y_deg, "ratio": r.ratio })))
        .collect();
    let top_ok = s.p_max.iter().all(|&p| {
        curve(p)
            .next_back()
            .is_some_and(|r| (0.98..=1.02).contains(&r.ratio))
    });
    let p_hi = max_of(s.p_max.iter().copied());
    let low = curve(p_hi).next();
    let kinks = s.kink_amplitudes(rows);
    vec![
        Check::invariant(
            "exact bandwidth never below approximate",
            min_ratio >= 1.0 - 1e-9,
            json!({ "min_ratio": min_ratio }),
        ),
        Check::claim("ratio near one at the largest amplitude", top_ok, json!(top)),
        Check::claim(
            "nearly doubled at the smallest amplitude",
            low.is_some_and(|r| (1.7..=2.3).contains(&r.ratio)),
            json!({ "p_max": p_hi, "y_deg": low.map(|r| r.y_deg), "ratio": low.map(|r| r.ratio) }),
        ),
        Check::claim(
            "two non-smooth points per curve",
            kinks.iter().all(|(_, k)| k.len() == 2),
            json!(kinks
                .iter()
                .map(|(p, k)| json!({ "p_max": p, "kinks_deg": k }))
                .collect::<Vec<_>>()),
        ),
    ]
}

pub fn verify_bandwidth(s: &BandwidthScenario, threads: usize) -> Report {
    guarded("bandwidth", s.validate(), || {
        Ok(Report::new("bandwidth", check_bandwidth(s, &s.run(threads)?)))
    })
}

// ---------------------------------------------------------------- pbc

pub fn check_pbc(s: &PbcScenario, log: &TrajectoryLog) -> Vec<Check> {
    let excess = max_of(log.power_per_joint.iter().flat_map(|p| {
        p.iter()
            .zip(&s.joint_power)
            .map(|(p, lim)| p - lim)
            .collect::<Vec<_>>()
    }));
    let v = log.scalar("V").unwrap_or(&[]);
    let rise = max_of(v.windows(2).map(|w| w[1] - w[0]));
    let last = log.final_state();
    let norm = last.map(|x| x.to_vector().norm()).unwrap_or(f64::INFINITY);
    vec![
        Check::invariant(
            "per-joint power within budget",
            excess <= 1e-6,
            json!({ "max_excess": excess, "budget": s.joint_power }),
        ),
        Check::claim(
            "Lyapunov function non-increasing",
            !v.is_empty() && rise <= 1e-6,
            json!({ "max_step_increase": rise, "samples": v.len() }),
        ),
        Check::claim(
            "converges to the origin",
            norm < 1e-2,
            json!({ "final_norm": norm, "time": log.times.last() }),
        ),
    ]
}

pub fn verify_pbc(s: &PbcScenario) -> Report {
    guarded("pbc-2link", s.validate(), || Ok(Report::new("pbc-2link", check_pbc(s, &run_pbc(s)?))))
}

// ---------------------------------------------------------------- mpc

/// Witness of an indefinite power form at stage `n ≥ 1`: by interlacing, the
/// principal block over stages `n − 1` and `n` bounds `λ_min(E_n)` from above.
pub fn power_form_witness(hz: &Horizon, cfg: &FinExample, n: usize) -> Result<f64> {
    let nu = hz.nu();
    let (e, _) = power_constraint_terms(hz, &cfg.constraints().velocity_map, &DVector::from_element(nu, cfg.rbar), n)?;
    let block = e.view(((n - 1) * nu, (n - 1) * nu), (2 * nu, 2 * nu)).into_owned();
    Ok(block.symmetric_eigenvalues().min())
}

pub fn check_mpc(cfg: &FinExample, runs: &[FinRun]) -> Result<Vec<Check>> {
    let hz = cfg.horizon()?;
    let m = HorizonMatrices::new(&hz)?;
    let mut cost_err = 0.0f64;
    for r in runs {
        let j = hz.cost(&r.plan.inputs)?;
        cost_err = cost_err.max((m.cost(&r.plan.inputs) - j).abs() / j.abs().max(1.0));
    }

    let nu = hz.nu();
    let rbar = DVector::from_element(nu, cfg.rbar);
    let vmap = cfg.constraints().velocity_map;
    let mut form_err = 0.0f64;
    let stages: Vec<usize> = [0, 1, 2, 5, 10, 50, 100, 200, hz.steps - 1]
        .into_iter()
        .filter(|&n| n < hz.steps)
        .collect();
    for r in runs {
        let xs = &r.plan.states;
        for &n in &stages {
            let (e, chi) = power_constraint_terms(&hz, &vmap, &rbar, n)?;
            let u = &r.plan.inputs;
            let form = u.dot(&(&e * u)) + chi.dot(u);
            let direct = stage_power(&(&vmap * &xs[n]), &u.rows(n * nu, nu).into_owned(), &rbar);
            form_err = form_err.max((form - direct).abs() / (1.0 + direct.abs()));
        }
    }

    let witnesses = (1..hz.steps)
        .map(|n| power_form_witness(&hz, cfg, n))
        .collect::<Result<Vec<_>>>()?;
    let worst_witness = max_of(witnesses.iter().copied());

    let cost = |i: usize| runs.get(i).map(|r| r.cost).unwrap_or(f64::NAN);
    let (j1, j2, j3) = (cost(0), cost(1), cost(2));
    let c1_le_c2 = j1 <= j2 + 1e-6 * j2.abs();
    let c2_le_c3 = j2 <= j3 + 1e-6 * j3.abs();

    let early = runs.first().map(|r| {
        max_of(
            r.log
                .times
                .iter()
                .zip(&r.log.power_total)
                .filter(|(t, _)| **t <= 0.05 + 1e-12)
                .map(|(_, p)| *p),
        )
    });
    let c3_peak = runs.get(2).map(|r| max_of(r.log.power_total.iter().copied()));
    let model_violation = runs
        .iter()
        .map(|r| r.model_violation(cfg))
        .collect::<Result<Vec<_>>>()?;
    let worst_model = max_of(model_violation.iter().copied());

    Ok(vec![
        Check::invariant("matrix cost matches rollout", cost_err <= 1e-8, json!({ "max_rel_err": cost_err })),
        Check::invariant(
            "power quadratic form matches rollout",
            form_err <= 1e-9,
            json!({ "max_rel_err": form_err, "stages": stages }),
        ),
        Check::claim(
            "power form indefinite beyond the first stage",
            worst_witness < 0.0,
            json!({ "max_witness_eigenvalue": worst_witness, "stages": hz.steps - 1 }),
        ),
        Check::claim(
            "cost ordering",
            c1_le_c2 && c2_le_c3,
            json!({ "J_C1": j1, "J_C2": j2, "J_C3": j3, "c1_le_c2": c1_le_c2, "c2_le_c3": c2_le_c3 }),
        ),
        Check::claim(
            "C1 reaches the supply limit early",
            early.is_some_and(|p| p >= 0.99 * cfg.p_max),
            json!({ "peak_power_first_50ms": early, "threshold": 0.99 * cfg.p_max }),
        ),
        Check::claim(
            "C3 stays conservative",
            c3_peak.is_some_and(|p| p <= 0.6 * cfg.p_max),
            json!({ "peak_power": c3_peak, "threshold": 0.6 * cfg.p_max }),
        ),
        Check::invariant(
            "commanded torques respect each model",
            worst_model <= 1e-7,
            json!({ "max_violation": worst_model }),
        ),
    ])
}

pub fn verify_mpc(cfg: &FinExample) -> Report {
    guarded("mpc-fin", cfg.validate(), || {
        let runs = crate::mpc::run_fin_example(cfg)?;
        Ok(Report::new("mpc-fin", check_mpc(cfg, &runs)?))
    })
}

// ---------------------------------------------------------------- clfqp

pub fn check_clfqp(residual: f64, runs: &[ClfRun]) -> Vec<Check> {
    let max_kkt = max_of(runs.iter().map(|r| r.max_kkt));
    let power = max_of(runs.iter().map(|r| r.power_violation));
    let torque = max_of(runs.iter().map(|r| r.torque_violation));
    let settle = |v: ClfVariant| {
        runs.iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.settling_joint1)
    };
    let (s1, s2, s3) = (
        settle(ClfVariant::RelaxedDynamic),
        settle(ClfVariant::RelaxedStatic),
        settle(ClfVariant::FeedbackLinearization),
    );
    let fastest = match (s1, s2, s3) {
        (Some(a), Some(b), Some(c)) => a <= b && a <= c,
        (Some(_), None, None) => true,
        _ => false,
    };
    let worst_decay = max_of(runs.iter().map(|r| r.decay.worst_ratio));
    vec![
        Check::invariant("Lyapunov equation residual", residual <= 1e-9, json!({ "residual": residual })),
        Check::invariant("QP KKT residuals", max_kkt <= 1e-7, json!({ "max_kkt": max_kkt })),
        Check::invariant(
            "power and torque limits met",
            power <= 1e-7 && torque <= 1e-7,
            json!({ "max_power_excess": power, "max_torque_excess": torque }),
        ),
        Check::claim(
            "C1 settles joint 1 fastest",
            fastest,
            json!({ "settling_C1": s1, "settling_C2": s2, "settling_C3": s3 }),
        ),
        Check::claim(
            "exponential decay without slack",
            runs.iter().all(|r| r.decay.samples > 0) && worst_decay <= 1.05,
            json!(runs
                .iter()
                .map(|r| json!({
                    "variant": r.variant.label(),
                    "intervals": r.decay.intervals,
                    "samples": r.decay.samples,
                    "worst_ratio": r.decay.worst_ratio,
                }))
                .collect::<Vec<_>>()),
        ),
    ]
}

pub fn verify_clfqp(s: &ClfScenario, threads: usize) -> Report {
    guarded("clfqp-2link", s.validate(), || {
        let (clf, runs) = run_clf_example(s, threads)?;
        Ok(Report::new("clfqp-2link", check_clfqp(clf.lyapunov_residual(), &runs)))
    })
}

// ---------------------------------------------------------------- servo

pub fn check_servo(s: &ServoScenario, results: &ServoResults) -> Result<Vec<Check>> {
    let c = results.check(s)?;
    Ok(vec![
        Check::claim(
            "exact limit settles no slower",
            c.exact_not_slower,
            json!({
                "amplitudes_deg": c.amplitudes_deg,
                "settling_exact": c.settling_exact,
                "settling_approx": c.settling_approx,
            }),
        ),
        Check::claim("settling gap grows with amplitude", c.gap_increasing, json!({ "gaps": c.gaps })),
        Check::claim(
            "approximate limit overshoots more at the largest step",
            c.approx_overshoots_more,
            json!({ "overshoot_exact": c.overshoot_exact, "overshoot_approx": c.overshoot_approx }),
        ),
        Check::claim(
            "exact magnitude at least approximate above threshold",
            c.magnitude_ok(),
            json!({
                "above_hz": s.compare_above_hz,
                "min_margin": c.magnitude_margin.map(|m| m.0),
                "at_hz": c.magnitude_margin.map(|m| m.1),
            }),
        ),
        Check::invariant(
            "power within supply",
            c.power_ok,
            json!({ "peak_power": c.peak_power, "p_max": s.p_max }),
        ),
    ])
}

pub fn verify_servo(s: &ServoScenario, threads: usize) -> Report {
    guarded("servo-1dof", s.validate(), || {
        Ok(Report::new("servo-1dof", check_servo(s, &run_servo(s, threads)?)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_config_becomes_a_failed_check() {
        let s = ServoScenario {
            p_max: -1.0,
            ..Default::default()
        };
        let r = verify_servo(&s, 1);
        assert!(!r.passed && !r.invariants_hold());
        assert_eq!(r.checks.len(), 1);
        assert_eq!(r.checks[0].name, "config");
    }

    #[test]
    fn claims_do_not_count_as_invariants() {
        let r = Report::new(
            "x",
            vec![
                Check::claim("ordering", false, json!(null)),
                Check::invariant("budget", true, json!(null)),
            ],
        );
        assert!(!r.passed);
        assert!(r.invariants_hold());
        assert!(r.check("budget").is_some_and(|c| c.passed));
    }

    #[test]
    fn fourier_oracle_is_seeded() {
        let a = check_fourier_oracle(20, 5).unwrap();
        let b = check_fourier_oracle(20, 5).unwrap();
        assert!(a.passed);
        assert_eq!(a.measured, b.measured);
    }

    #[test]
    fn short_fin_horizon_is_indefinite_past_the_first_stage() {
        let cfg = FinExample {
            steps: 8,
            ..Default::default()
        };
        let hz = cfg.horizon().unwrap();
        for n in 1..hz.steps {
            assert!(power_form_witness(&hz, &cfg, n).unwrap() < 0.0, "stage {n}");
        }
    }
}
