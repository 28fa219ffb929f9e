//! The `driftflow` command: run scenarios, check decay theorems and functional
//! inequalities, and compare two scenarios.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 solver failure, 3 I/O failure,
//! 4 checks failed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{load_config, ScenarioConfig};
use crate::diagnostics::{self, Applicability, InequalityReport};
use crate::dynamics::{self, Regime, Scenario, State, Trajectory};
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECKS_FAILED: i32 = 4;

/// Fraction of a rate the fitted decay must reach for the rate check.
pub const RATE_FRACTION: f64 = 0.8;
/// Energy gaps below this (relative) size count as already converged.
pub const STEADY_GAP: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "driftflow", version, about = "Coupled population/classifier gradient flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write density snapshots, energy.csv and summary.txt.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `output.dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record a sample every K time steps.
        #[arg(long, value_name = "K")]
        stride: Option<usize>,
    },
    /// Run a scenario and check decay rates and functional inequalities.
    Check {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run two scenarios and compare their loss histories.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        e if e.is_solver_failure() => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
}

/// Builds and runs the scenario of a config.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(Scenario, Trajectory)> {
    let scenario = cfg.build()?;
    let trajectory = dynamics::run(&scenario)?;
    Ok((scenario, trajectory))
}

fn energy_of(scenario: &Scenario, state: &State) -> f64 {
    match scenario.regime {
        Regime::Aligned => scenario.model.energy_aligned(&state.rho, state.x()),
        _ => scenario.model.energy_competitive(&state.rho, state.x()),
    }
}

/// Steady state the relative energy is measured against.
#[derive(Debug, Clone)]
pub struct Target {
    pub state: State,
    pub energy: f64,
    /// `"equilibrium"` when solved directly, `"terminal sample"` otherwise.
    pub source: &'static str,
}

/// Solves for the joint steady state where a direct solver applies (1D,
/// single population, deterministic regimes) and falls back to the last
/// sample of the trajectory.
pub fn steady_target(scenario: &Scenario, trajectory: &Trajectory) -> Target {
    let last = trajectory.last();
    let solvable = matches!(
        scenario.regime,
        Regime::Aligned | Regime::CompetitiveCoupled { .. } | Regime::CompetitiveFastX | Regime::CompetitiveFastRho
    ) && scenario.initial.tau.is_none()
        && scenario.model.grid().dim() == 1;
    if solvable {
        if let Ok((rho, x)) = dynamics::equilibrium(&scenario.model, scenario.regime.objective(), last.state.x()) {
            let state = State { rho, classifier: last.state.classifier.with_x(x), tau: None };
            let energy = energy_of(scenario, &state);
            return Target { state, energy, source: "equilibrium" };
        }
    }
    Target { state: last.state.clone(), energy: last.energy, source: "terminal sample" }
}

/// Oriented energy gap `G(t) - G*` of every sample (positive along the flow).
pub fn relative_energies(trajectory: &Trajectory, target_energy: f64) -> Vec<f64> {
    let s = diagnostics::energy_orientation(&trajectory.regime);
    trajectory.samples.iter().map(|p| s * (p.energy - target_energy)).collect()
}

fn x_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|k| format!("x{k}")).collect()
}

fn snapshot_name(prefix: &str, t: f64) -> String {
    format!("{prefix}_t{t:011.4}.csv")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `energy.csv`.
pub fn write_energy_csv(path: &Path, trajectory: &Trajectory, target_energy: f64) -> Result<()> {
    let dim = trajectory.initial().state.x().len();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["t", "energy", "relative_energy", "dissipation", "classifier_loss", "population_loss", "residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(x_header(dim));
    header.extend(["modes".to_string(), "mass".to_string(), "min_value".to_string()]);
    w.write_record(&header)?;
    for (p, rel) in trajectory.samples.iter().zip(relative_energies(trajectory, target_energy)) {
        let mut row = vec![
            p.t.to_string(),
            format!("{:e}", p.energy),
            format!("{rel:e}"),
            format!("{:e}", p.dissipation),
            format!("{:e}", p.classifier_loss),
            format!("{:e}", p.population_loss),
            format!("{:e}", p.residual),
        ];
        row.extend(p.state.x().iter().map(|v| format!("{v:e}")));
        row.push(p.modes.map_or(String::new(), |m| m.to_string()));
        row.push(format!("{:e}", p.mass));
        row.push(format!("{:e}", p.min_value));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// Result of `driftflow run`.
#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub scenario: Scenario,
    pub trajectory: Trajectory,
    pub target: Target,
    pub snapshots: Vec<PathBuf>,
}

/// Decay rate over the trailing half, or over the whole run when the tail has
/// already reached round-off.
fn fitted(times: &[f64], values: &[f64]) -> Option<f64> {
    diagnostics::fit_decay_rate(times, values, 0.5).or_else(|_| diagnostics::fit_decay_rate(times, values, 1.0)).ok()
}

fn run_summary(cfg: &ScenarioConfig, o: &RunOutcome) -> String {
    let last = o.trajectory.last();
    let c = &o.trajectory.conservation;
    let times = o.trajectory.times();
    let rel = relative_energies(&o.trajectory, o.target.energy);
    let rate = theorem_rate_of(&o.scenario);
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", cfg.name);
    let _ = writeln!(s, "regime: {}", o.scenario.regime.name());
    let _ = writeln!(s, "grid: {}", o.scenario.model.grid());
    let _ = writeln!(s, "final_time: {}", last.t);
    let _ = writeln!(s, "samples: {}", o.trajectory.samples.len());
    let _ = writeln!(s, "substeps: {}", c.substeps);
    let _ = writeln!(s, "final_x: {:?}", last.state.x());
    let _ = writeln!(s, "final_energy: {:e}", last.energy);
    let _ = writeln!(s, "final_classifier_loss: {:e}", last.classifier_loss);
    let _ = writeln!(s, "final_population_loss: {:e}", last.population_loss);
    let _ = writeln!(s, "final_residual: {:e}", last.residual);
    let _ = writeln!(s, "final_dissipation: {:e}", last.dissipation);
    let _ = writeln!(s, "modes: {} -> {}", fmt_modes(o.trajectory.initial().modes), fmt_modes(last.modes));
    let _ = writeln!(s, "max_step_mass_drift: {:e}", c.max_step_drift);
    let _ = writeln!(s, "cumulative_mass_drift: {:e}", c.cumulative_drift);
    let _ = writeln!(s, "min_cell_value: {:e}", c.min_value);
    let _ = writeln!(s, "steady_state: {}", o.target.source);
    let _ = writeln!(s, "final_relative_energy: {:e}", rel.last().copied().unwrap_or(0.0));
    let _ = writeln!(s, "fitted_energy_rate: {}", fmt_opt(fitted(&times, &rel)));
    if o.scenario.regime.evolves_x() {
        let dist: Vec<f64> = o
            .trajectory
            .samples
            .iter()
            .map(|p| p.state.x().iter().zip(o.target.state.x()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        let _ = writeln!(s, "fitted_x_rate: {}", fmt_opt(fitted(&times, &dist)));
    }
    let _ = writeln!(
        s,
        "theorem_rate: {} ({}{})",
        fmt_opt(rate.lambda),
        if rate.applicable { "applicable: " } else { "not applicable: " },
        rate.reason
    );
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:e}"))
}

fn fmt_modes(m: Option<usize>) -> String {
    m.map_or("n/a".into(), |m| m.to_string())
}

fn theorem_rate_of(scenario: &Scenario) -> Applicability {
    diagnostics::theorem_rate(&scenario.model, &scenario.regime)
}

/// Runs a loaded config and writes its artifacts into `out_dir`.
pub fn run_config(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunOutcome> {
    create_dir(out_dir)?;
    let (scenario, trajectory) = simulate(cfg)?;
    let target = steady_target(&scenario, &trajectory);
    let mut snapshots = Vec::new();
    let n = trajectory.samples.len();
    for (k, p) in trajectory.samples.iter().enumerate() {
        if k % cfg.snapshot_stride != 0 && k + 1 != n {
            continue;
        }
        let path = out_dir.join(snapshot_name("density", p.t));
        p.state.rho.save_csv(&path)?;
        snapshots.push(path);
        if let Some(tau) = &p.state.tau {
            tau.save_csv(&out_dir.join(snapshot_name("tau", p.t)))?;
        }
    }
    write_energy_csv(&out_dir.join("energy.csv"), &trajectory, target.energy)?;
    let outcome = RunOutcome { out_dir: out_dir.to_path_buf(), scenario, trajectory, target, snapshots };
    write_text(&out_dir.join("summary.txt"), &run_summary(cfg, &outcome))?;
    Ok(outcome)
}

/// `driftflow run`.
pub fn cmd_run(path: &Path, flags: &RunFlags) -> Result<RunOutcome> {
    let mut cfg = load_config(path)?;
    if let Some(k) = flags.stride {
        if k == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        cfg.sample_stride = k;
    }
    let out = flags.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    run_config(&cfg, &out)
}

/// Verdicts of `driftflow check`.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub scenario: String,
    pub regime: String,
    pub applicability: Applicability,
    pub steady_state: String,
    /// Fitted decay rate of the relative energy over the trailing half.
    pub empirical_rate: Option<f64>,
    /// `Some(passed)` when a theorem rate applies.
    pub rate_ok: Option<bool>,
    pub log_sobolev: Option<bool>,
    pub talagrand: Option<bool>,
    pub hwi: Option<bool>,
    pub energy_balance: Option<bool>,
    #[serde(skip)]
    pub report: Option<InequalityReport>,
}

impl CheckOutcome {
    /// True when every applicable check passed.
    pub fn passed(&self) -> bool {
        [self.rate_ok, self.log_sobolev, self.talagrand, self.hwi, self.energy_balance]
            .iter()
            .all(|v| *v != Some(false))
    }

    pub fn verdicts(&self) -> String {
        let v = |x: Option<bool>| match x {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "not applicable",
        };
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} ({}), steady state from {}", self.scenario, self.regime, self.steady_state);
        let _ = writeln!(
            s,
            "theorem rate: {} [{}]",
            fmt_opt(self.applicability.lambda),
            self.applicability.reason
        );
        let _ = writeln!(s, "fitted rate: {}", fmt_opt(self.empirical_rate));
        let _ = writeln!(s, "rate check: {}", v(self.rate_ok));
        let _ = writeln!(s, "log-Sobolev: {}", v(self.log_sobolev));
        let _ = writeln!(s, "Talagrand: {}", v(self.talagrand));
        let _ = writeln!(s, "HWI: {}", v(self.hwi));
        let _ = writeln!(s, "energy balance: {}", v(self.energy_balance));
        let _ = writeln!(s, "overall: {}", if self.passed() { "pass" } else { "FAIL" });
        s
    }
}

/// Evaluates the checks on a finished run.
pub fn check_trajectory(name: &str, scenario: &Scenario, trajectory: &Trajectory) -> Result<CheckOutcome> {
    let applicability = theorem_rate_of(scenario);
    let target = steady_target(scenario, trajectory);
    let times = trajectory.times();
    let rel = relative_energies(trajectory, target.energy);
    let mut out = CheckOutcome {
        scenario: name.to_string(),
        regime: scenario.regime.name().to_string(),
        steady_state: target.source.to_string(),
        empirical_rate: fitted(&times, &rel),
        rate_ok: None,
        log_sobolev: None,
        talagrand: None,
        hwi: None,
        energy_balance: None,
        report: None,
        applicability,
    };
    if let (true, Some(lambda)) = (out.applicability.applicable, out.applicability.lambda) {
        let report = diagnostics::inequality_report_against(
            trajectory,
            &scenario.model,
            &scenario.regime,
            lambda,
            &target.state,
            target.energy,
        )?;
        out.empirical_rate = report.fitted_rate;
        // a run that starts at the steady state satisfies any rate bound
        let at_rest = rel.iter().all(|g| g.abs() <= STEADY_GAP * (1.0 + target.energy.abs()));
        out.rate_ok = Some(at_rest || report.fitted_rate.is_some_and(|r| r >= RATE_FRACTION * lambda));
        out.log_sobolev = Some(report.log_sobolev);
        out.talagrand = Some(report.talagrand);
        out.hwi = Some(report.hwi);
        out.energy_balance = Some(report.energy_balance);
        out.report = Some(report);
    }
    Ok(out)
}

/// `driftflow check`: writes `inequalities.csv` (when a theorem applies),
/// `check.json` and the run artifacts.
pub fn cmd_check(path: &Path, out: Option<&Path>) -> Result<CheckOutcome> {
    let cfg = load_config(path)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let run = run_config(&cfg, &dir)?;
    let outcome = check_trajectory(&cfg.name, &run.scenario, &run.trajectory)?;
    if let Some(report) = &outcome.report {
        let p = dir.join("inequalities.csv");
        let file = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    let json = serde_json::to_string_pretty(&outcome).expect("check outcome serializes");
    write_text(&dir.join("check.json"), &json)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub t: f64,
    pub classifier_a: f64,
    pub classifier_b: f64,
    pub population_a: f64,
    pub population_b: f64,
}

/// Paired loss histories of two runs.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub name_a: String,
    pub name_b: String,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn initial(&self) -> &CompareRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &CompareRow {
        self.rows.last().expect("comparison has samples")
    }

    pub fn table(&self) -> String {
        let (a, b) = (&self.name_a, &self.name_b);
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>14} {:>14} {:>14}", "quantity", a, b, "a - b");
        for (label, r) in [("initial", self.initial()), ("final", self.last())] {
            let _ = writeln!(
                s,
                "{:<24} {:>14.6e} {:>14.6e} {:>14.6e}",
                format!("{label} classifier loss"),
                r.classifier_a,
                r.classifier_b,
                r.classifier_a - r.classifier_b
            );
            let _ = writeln!(
                s,
                "{:<24} {:>14.6e} {:>14.6e} {:>14.6e}",
                format!("{label} population loss"),
                r.population_a,
                r.population_b,
                r.population_a - r.population_b
            );
        }
        s
    }
}

/// Pairs the samples of two runs; grids and sample times must agree.
pub fn compare_trajectories(name_a: &str, a: &Trajectory, name_b: &str, b: &Trajectory) -> Result<Comparison> {
    let (ga, gb) = (a.initial().state.rho.grid(), b.initial().state.rho.grid());
    if ga != gb {
        return Err(Error::GridMismatch);
    }
    if a.samples.len() != b.samples.len()
        || a.samples.iter().zip(&b.samples).any(|(p, q)| (p.t - q.t).abs() > 1e-9 * p.t.abs().max(1.0))
    {
        return Err(Error::param("time", "both scenarios must share final time, dt and sample stride"));
    }
    let rows = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(p, q)| CompareRow {
            t: p.t,
            classifier_a: p.classifier_loss,
            classifier_b: q.classifier_loss,
            population_a: p.population_loss,
            population_b: q.population_loss,
        })
        .collect();
    Ok(Comparison { name_a: name_a.to_string(), name_b: name_b.to_string(), rows })
}

/// Writes `compare.csv`.
pub fn write_compare_csv(path: &Path, c: &Comparison) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "t",
        "classifier_loss_a",
        "classifier_loss_b",
        "classifier_loss_diff",
        "population_loss_a",
        "population_loss_b",
        "population_loss_diff",
    ])?;
    for r in &c.rows {
        w.write_record([
            r.t.to_string(),
            format!("{:e}", r.classifier_a),
            format!("{:e}", r.classifier_b),
            format!("{:e}", r.classifier_a - r.classifier_b),
            format!("{:e}", r.population_a),
            format!("{:e}", r.population_b),
            format!("{:e}", r.population_a - r.population_b),
        ])?;
    }
    finish(w, path)
}

/// `driftflow compare`: writes `compare.csv` and `compare.txt`.
pub fn cmd_compare(path_a: &Path, path_b: &Path, out: Option<&Path>) -> Result<Comparison> {
    let (ca, cb) = (load_config(path_a)?, load_config(path_b)?);
    if ca.grid()? != cb.grid()? {
        return Err(Error::GridMismatch);
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        ca.output_dir.with_file_name(format!("compare_{}_{}", ca.name, cb.name))
    });
    create_dir(&dir)?;
    let (_, ta) = simulate(&ca)?;
    let (_, tb) = simulate(&cb)?;
    let cmp = compare_trajectories(&ca.name, &ta, &cb.name, &tb)?;
    write_compare_csv(&dir.join("compare.csv"), &cmp)?;
    write_text(&dir.join("compare.txt"), &cmp.table())?;
    Ok(cmp)
}

fn report(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

/// Entry point of the binary; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run { config, out, stride } => match cmd_run(&config, &RunFlags { out, stride }) {
            Ok(o) => {
                let last = o.trajectory.last();
                println!(
                    "{}: t = {}, x = {:?}, energy = {:e}, residual = {:e}, output in {}",
                    o.scenario.regime.name(),
                    last.t,
                    last.state.x(),
                    last.energy,
                    last.residual,
                    o.out_dir.display()
                );
                EXIT_OK
            }
            Err(e) => report(&e),
        },
        Command::Check { config, out } => match cmd_check(&config, out.as_deref()) {
            Ok(o) => {
                print!("{}", o.verdicts());
                if o.passed() {
                    EXIT_OK
                } else {
                    EXIT_CHECKS_FAILED
                }
            }
            Err(e) => report(&e),
        },
        Command::Compare { config_a, config_b, out } => match cmd_compare(&config_a, &config_b, out.as_deref()) {
            Ok(c) => {
                print!("{}", c.table());
                EXIT_OK
            }
            Err(e) => report(&e),
        },
    }
}
