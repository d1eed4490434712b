use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use powersat::bandwidth::BandwidthScenario;
use powersat::clfqp::{run_clf_example, ClfScenario};
use powersat::descfun::{DescfunScenario, NyquistRow};
use powersat::mpc::{run_fin_example, ExecutionMode, FinExample};
use powersat::nlcontrol::{run_pbc, PbcScenario};
use powersat::par::available_threads;
use powersat::servo::{run_servo, ServoScenario};
use powersat::verify::{self, Report};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Power-limited actuator control scenarios.
#[derive(Parser, Debug)]
#[command(name = "powersat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON file overriding scenario parameters.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory [default: $POWERSAT_OUT or ./out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Execution mode for mpc-fin.
    #[arg(long, global = true)]
    mode: Option<ExecutionMode>,

    /// Spread independent sweep points over all cores.
    #[arg(long, global = true)]
    parallel: bool,

    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describing-function Nyquist tables for the exact limit and plain saturation.
    Descfun,
    /// Closed-loop bandwidth of exact versus approximate torque limits.
    Bandwidth,
    /// Passivity-based regulation of a two-link arm under per-joint power limits.
    #[command(name = "pbc-2link")]
    Pbc2link,
    /// Horizon MPC on the four-actuator fin system under three power models.
    #[command(name = "mpc-fin")]
    MpcFin,
    /// CLF-QP regulation of a two-link arm with dynamic and static power allocation.
    #[command(name = "clfqp-2link")]
    Clfqp2link,
    /// One-axis PID servo, step and chirp, with exact and approximate limits.
    #[command(name = "servo-1dof")]
    Servo1dof,
    /// Run every check for one scenario and write a JSON report.
    Verify {
        #[arg(value_enum)]
        scenario: Scenario,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Scenario {
    Descfun,
    Bandwidth,
    #[value(name = "pbc-2link")]
    Pbc2link,
    #[value(name = "mpc-fin")]
    MpcFin,
    #[value(name = "clfqp-2link")]
    Clfqp2link,
    #[value(name = "servo-1dof")]
    Servo1dof,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Self::Descfun => "descfun",
            Self::Bandwidth => "bandwidth",
            Self::Pbc2link => "pbc-2link",
            Self::MpcFin => "mpc-fin",
            Self::Clfqp2link => "clfqp-2link",
            Self::Servo1dof => "servo-1dof",
        }
    }
}

struct Ctx {
    config: Option<PathBuf>,
    out: PathBuf,
    mode: Option<ExecutionMode>,
    threads: usize,
    seed: u64,
}

impl Ctx {
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T> {
        let Some(path) = &self.config else {
            return Ok(T::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
    }

    fn dir(&self, scenario: Scenario) -> Result<PathBuf> {
        let dir = self.out.join(scenario.name());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn no_mode(&self, scenario: Scenario) -> Result<()> {
        if self.mode.is_some() {
            bail!("--mode only applies to mpc-fin, not {}", scenario.name());
        }
        Ok(())
    }

    fn fin_config(&self) -> Result<FinExample> {
        let mut cfg: FinExample = self.load()?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn print_report(r: &Report) {
    for c in &r.checks {
        let tag = if c.passed { "pass" } else { "FAIL" };
        let kind = if c.invariant { "invariant" } else { "claim" };
        println!("{tag}  {} [{kind}] {}", r.scenario, c.name);
    }
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli
        .out
        .or_else(|| std::env::var_os("POWERSAT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx {
        config: cli.config,
        out,
        mode: cli.mode,
        threads: if cli.parallel { available_threads() } else { 1 },
        seed: cli.seed,
    };
    match cli.command {
        Command::Descfun => descfun(&ctx),
        Command::Bandwidth => bandwidth(&ctx),
        Command::Pbc2link => pbc(&ctx),
        Command::MpcFin => mpc(&ctx),
        Command::Clfqp2link => clfqp(&ctx),
        Command::Servo1dof => servo(&ctx),
        Command::Verify { scenario } => verify_scenario(&ctx, scenario),
    }
}

/// Writes the report, prints it, and tells whether the invariants held.
fn finish(dir: &Path, report: &Report) -> Result<bool> {
    write_json(&dir.join("report.json"), report)?;
    print_report(report);
    Ok(report.invariants_hold())
}

fn descfun(ctx: &Ctx) -> Result<bool> {
    ctx.no_mode(Scenario::Descfun)?;
    let s: DescfunScenario = ctx.load()?;
    s.validate()?;
    let r = s.run(ctx.threads)?;
    let dir = ctx.dir(Scenario::Descfun)?;
    let t = &r.tables;
    let tables: [(&str, &[NyquistRow]); 5] = [
        ("open_loop.csv", &t.open_loop),
        ("describing.csv", &t.describing),
        ("open_loop_df.csv", &t.open_loop_df),
        ("saturation.csv", &r.saturation),
        ("open_loop_sat.csv", &r.open_loop_sat),
    ];
    for (name, rows) in tables {
        write_rows(&dir.join(name), rows)?;
    }
    #[derive(Serialize)]
    struct Point {
        #[serde(rename = "A")]
        amplitude: f64,
        omega: f64,
        gain: f64,
        phase: f64,
        active: bool,
        iterations: usize,
        residual: f64,
    }
    write_rows(
        &dir.join("points.csv"),
        t.points.iter().map(|p| Point {
            amplitude: p.amplitude,
            omega: p.omega,
            gain: p.gain,
            phase: p.phase,
            active: p.window.is_some(),
            iterations: p.iterations,
            residual: p.residual,
        }),
    )?;
    let mut checks = verify::check_descfun(&r);
    checks.push(verify::check_fourier_oracle(200, ctx.seed)?);
    finish(&dir, &Report::new("descfun", checks))
}

fn bandwidth(ctx: &Ctx) -> Result<bool> {
    ctx.no_mode(Scenario::Bandwidth)?;
    let s: BandwidthScenario = ctx.load()?;
    s.validate()?;
    let rows = s.run(ctx.threads)?;
    let dir = ctx.dir(Scenario::Bandwidth)?;
    write_rows(&dir.join("ratio.csv"), &rows)?;
    finish(&dir, &Report::new("bandwidth", verify::check_bandwidth(&s, &rows)))
}

fn pbc(ctx: &Ctx) -> Result<bool> {
    ctx.no_mode(Scenario::Pbc2link)?;
    let s: PbcScenario = ctx.load()?;
    s.validate()?;
    let log = run_pbc(&s)?;
    let dir = ctx.dir(Scenario::Pbc2link)?;
    // One row per millisecond at the default step.
    let stride = (1e-3 / s.dt).round().max(1.0) as usize;
    log.write_csv(&dir.join("trajectory.csv"), stride)?;
    finish(&dir, &Report::new("pbc-2link", verify::check_pbc(&s, &log)))
}

fn mpc(ctx: &Ctx) -> Result<bool> {
    let cfg = ctx.fin_config()?;
    cfg.validate()?;
    let runs = run_fin_example(&cfg)?;
    let dir = ctx.dir(Scenario::MpcFin)?;
    #[derive(Serialize)]
    struct Summary {
        model: &'static str,
        cost: f64,
        status: String,
        iterations: usize,
        settling_max: Option<f64>,
        peak_power: f64,
    }
    let mut summary = Vec::new();
    for r in &runs {
        let label = r.model.label();
        r.log.write_csv(&dir.join(format!("trajectory_{label}.csv")), 1)?;
        summary.push(Summary {
            model: label,
            cost: r.cost,
            status: format!("{:?}", r.plan.status),
            iterations: r.plan.iterations,
            settling_max: r
                .settling
                .iter()
                .try_fold(0.0f64, |m, s| s.map(|s| m.max(s))),
            peak_power: r.log.power_total.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    write_rows(&dir.join("summary.csv"), summary)?;
    finish(&dir, &Report::new("mpc-fin", verify::check_mpc(&cfg, &runs)?))
}

fn clfqp(ctx: &Ctx) -> Result<bool> {
    ctx.no_mode(Scenario::Clfqp2link)?;
    let s: ClfScenario = ctx.load()?;
    s.validate()?;
    let (clf, runs) = run_clf_example(&s, ctx.threads)?;
    let dir = ctx.dir(Scenario::Clfqp2link)?;
    #[derive(Serialize)]
    struct Summary {
        variant: &'static str,
        settling_joint1: Option<f64>,
        max_joint2_deviation: f64,
        peak_power: f64,
        max_kkt: f64,
    }
    for r in &runs {
        r.log.write_csv(&dir.join(format!("trajectory_{}.csv", r.variant.label())), 1)?;
    }
    write_rows(
        &dir.join("summary.csv"),
        runs.iter().map(|r| Summary {
            variant: r.variant.label(),
            settling_joint1: r.settling_joint1,
            max_joint2_deviation: r.max_joint2_deviation,
            peak_power: r.peak_power,
            max_kkt: r.max_kkt,
        }),
    )?;
    finish(&dir, &Report::new("clfqp-2link", verify::check_clfqp(clf.lyapunov_residual(), &runs)))
}

fn servo(ctx: &Ctx) -> Result<bool> {
    ctx.no_mode(Scenario::Servo1dof)?;
    let s: ServoScenario = ctx.load()?;
    s.validate()?;
    let r = run_servo(&s, ctx.threads)?;
    let dir = ctx.dir(Scenario::Servo1dof)?;
    #[derive(Serialize)]
    struct Step {
        variant: &'static str,
        amplitude_deg: f64,
        settling: Option<f64>,
        overshoot_pct: f64,
        peak_power: f64,
    }
    write_rows(
        &dir.join("steps.csv"),
        r.steps.iter().map(|st| Step {
            variant: st.variant.label(),
            amplitude_deg: st.amplitude_deg,
            settling: st.settling,
            overshoot_pct: st.overshoot,
            peak_power: st.peak_power,
        }),
    )?;
    for st in &r.steps {
        let name = format!("step_{}_{}deg.csv", st.variant.label(), st.amplitude_deg);
        st.log.write_csv(&dir.join(name), 1)?;
    }
    for c in &r.chirps {
        write_rows(&dir.join(format!("frf_{}.csv", c.variant.label())), &c.frf)?;
    }
    finish(&dir, &Report::new("servo-1dof", verify::check_servo(&s, &r)?))
}

fn verify_scenario(ctx: &Ctx, scenario: Scenario) -> Result<bool> {
    let name = scenario.name();
    if !matches!(scenario, Scenario::MpcFin) {
        ctx.no_mode(scenario)?;
    }
    // A config that parses but fails validation is reported, not raised.
    let report = match scenario {
        Scenario::Descfun => verify::verify_descfun(&ctx.load()?, ctx.threads, ctx.seed),
        Scenario::Bandwidth => verify::verify_bandwidth(&ctx.load()?, ctx.threads),
        Scenario::Pbc2link => verify::verify_pbc(&ctx.load()?),
        Scenario::MpcFin => verify::verify_mpc(&ctx.fin_config()?),
        Scenario::Clfqp2link => verify::verify_clfqp(&ctx.load()?, ctx.threads),
        Scenario::Servo1dof => verify::verify_servo(&ctx.load()?, ctx.threads),
    };
    let dir = ctx.dir(scenario)?;
    write_json(&dir.join("verify.json"), &report)?;
    print_report(&report);
    println!("{} {name}", if report.passed { "PASSED" } else { "FAILED" });
    Ok(report.passed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
