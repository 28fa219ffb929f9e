//! Metrics and checks on densities and trajectories.

use serde::Serialize;

use crate::dynamics::{self, Regime, State, Trajectory};
use crate::error::{Error, Result};
use crate::grid::Density;
use crate::model::{EnergyModel, Reference};

/// Number of quantile nodes used by [`wasserstein2_1d`].
pub const QUANTILE_NODES: usize = 1000;
/// Cells below this value are ignored by the steady-state residual.
pub const RESIDUAL_SUPPORT: f64 = 1e-8;
pub const SLACK_REL: f64 = 0.05;
pub const SLACK_ABS: f64 = 1e-6;
/// Relative tolerance of the energy-balance check.
pub const BALANCE_TOL: f64 = 0.1;
/// Samples with dissipation below this are at round-off and skip the
/// energy-balance check.
pub const BALANCE_FLOOR: f64 = 1e-12;

/// Quantile function of the piecewise-linear CDF at the midpoint nodes
/// `(k + 1/2) / QUANTILE_NODES`.
fn quantiles(rho: &Density) -> Result<Vec<f64>> {
    let grid = rho.grid();
    if grid.dim() != 1 {
        return Err(Error::Unsupported("Wasserstein distances are only implemented on line grids"));
    }
    let axis = grid.axis(0);
    let h = axis.width();
    let cdf = rho.cell_cdf();
    let total = *cdf.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::EmptyDensity);
    }
    let dv = grid.cell_volume();
    Ok((0..QUANTILE_NODES)
        .map(|k| {
            let u = (k as f64 + 0.5) / QUANTILE_NODES as f64 * total;
            let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let before = if i == 0 { 0.0 } else { cdf[i - 1] };
            let m = rho.values()[i] * dv;
            let frac = if m > 0.0 { ((u - before) / m).clamp(0.0, 1.0) } else { 0.5 };
            axis.lower + (i as f64 + frac) * h
        })
        .collect())
}

/// Quadratic Wasserstein distance between two densities on a line, from the
/// quantile coupling.
pub fn wasserstein2_1d(a: &Density, b: &Density) -> Result<f64> {
    a.same_grid(b)?;
    let (qa, qb) = (quantiles(a)?, quantiles(b)?);
    let s: f64 = qa.iter().zip(&qb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((s / QUANTILE_NODES as f64).sqrt())
}

/// `sqrt(W2(rho1, rho2)^2 + |x1 - x2|^2)`.
pub fn joint_metric(rho1: &Density, x1: &[f64], rho2: &Density, x2: &[f64]) -> Result<f64> {
    let w = wasserstein2_1d(rho1, rho2)?;
    let dx: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((w * w + dx).sqrt())
}

/// Centered-difference gradient of a cell field, one-sided at the walls.
/// Returns one array per axis.
pub fn cell_gradient(field: &[f64], rho: &Density) -> Vec<Vec<f64>> {
    let grid = rho.grid();
    let diff = |f: &[f64], stride: usize, i: usize, n: usize, h: f64, at: usize| -> f64 {
        if n < 2 {
            0.0
        } else if i == 0 {
            (f[at + stride] - f[at]) / h
        } else if i == n - 1 {
            (f[at] - f[at - stride]) / h
        } else {
            (f[at + stride] - f[at - stride]) / (2.0 * h)
        }
    };
    match grid.dim() {
        1 => {
            let a = grid.axis(0);
            vec![(0..a.cells).map(|i| diff(field, 1, i, a.cells, a.width(), i)).collect()]
        }
        _ => {
            let (ax, ay) = (grid.axis(0), grid.axis(1));
            let (nx, ny) = (ax.cells, ay.cells);
            let mut gx = vec![0.0; nx * ny];
            let mut gy = vec![0.0; nx * ny];
            for i in 0..nx {
                for j in 0..ny {
                    let c = i * ny + j;
                    gx[c] = diff(field, ny, i, nx, ax.width(), c);
                    gy[c] = diff(field, 1, j, ny, ay.width(), c);
                }
            }
            vec![gx, gy]
        }
    }
}

/// `sum |grad xi|^2 rho dV` with centered differences.
fn transport_dissipation(field: &[f64], rho: &Density) -> f64 {
    let grads = cell_gradient(field, rho);
    let dv = rho.grid().cell_volume();
    rho.values()
        .iter()
        .enumerate()
        .map(|(k, r)| grads.iter().map(|g| g[k] * g[k]).sum::<f64>() * r)
        .sum::<f64>()
        * dv
}

/// Largest `|xi_j - xi_i| / h` over faces whose two cells both carry at least
/// [`RESIDUAL_SUPPORT`].
fn face_residual(field: &[f64], rho: &Density) -> f64 {
    let grid = rho.grid();
    let v = rho.values();
    let mut worst: f64 = 0.0;
    let mut check = |a: usize, b: usize, h: f64| {
        if v[a] >= RESIDUAL_SUPPORT && v[b] >= RESIDUAL_SUPPORT {
            worst = worst.max((field[b] - field[a]).abs() / h);
        }
    };
    match grid.dim() {
        1 => {
            let h = grid.axis(0).width();
            for i in 0..v.len() - 1 {
                check(i, i + 1, h);
            }
        }
        _ => {
            let (ax, ay) = (grid.axis(0), grid.axis(1));
            let (nx, ny) = (ax.cells, ay.cells);
            for i in 0..nx {
                for j in 0..ny {
                    let c = i * ny + j;
                    if i + 1 < nx {
                        check(c, c + ny, ax.width());
                    }
                    if j + 1 < ny {
                        check(c, c + 1, ay.width());
                    }
                }
            }
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dissipation_with(model: &EnergyModel, regime: &Regime, state: &State, tau_ref: Option<&Reference>) -> f64 {
    let (xi, _, speed) = dynamics::rho_drive(model, regime, state);
    let mut d = speed * transport_dissipation(&xi, &state.rho);
    if let (Some(tau), Some(r)) = (&state.tau, tau_ref) {
        d += transport_dissipation(&dynamics::tau_field(model, r, tau, state.x()), tau);
    }
    if regime.evolves_x() && !matches!(regime, Regime::CompetitiveFastX) {
        let g = dynamics::classifier_gradient(model, state);
        d += g.iter().map(|v| v * v).sum::<f64>();
    }
    d
}

pub(crate) fn residual_with(model: &EnergyModel, regime: &Regime, state: &State, tau_ref: Option<&Reference>) -> f64 {
    let (xi, _, _) = dynamics::rho_drive(model, regime, state);
    let mut r = face_residual(&xi, &state.rho);
    if let (Some(tau), Some(reference)) = (&state.tau, tau_ref) {
        r += face_residual(&dynamics::tau_field(model, reference, tau, state.x()), tau);
    }
    if regime.evolves_x() {
        r += norm(&dynamics::classifier_gradient(model, state));
    }
    r
}

fn bare_state(rho: &Density, x: &[f64], model: &EnergyModel) -> State {
    State {
        rho: rho.clone(),
        classifier: dynamics::ClassifierState { x: x.to_vec(), anchor: model.anchor.clone(), beta: model.beta },
        tau: None,
    }
}

/// Dissipation of the regime's energy: `sum |grad xi|^2 rho dV` (scaled by
/// the timescale ratio where there is one) plus `|grad_x G|^2` when `x`
/// follows a gradient.
pub fn dissipation(rho: &Density, x: &[f64], model: &EnergyModel, regime: &Regime) -> f64 {
    dissipation_with(model, regime, &bare_state(rho, x, model), None)
}

/// Sup of `|face difference of xi| / h` over the support of `rho`, plus
/// `|grad_x G|` when `x` follows a gradient.
pub fn steady_state_residual(rho: &Density, x: &[f64], model: &EnergyModel, regime: &Regime) -> f64 {
    residual_with(model, regime, &bare_state(rho, x, model), None)
}

/// Number of well-separated local maxima of a line density.
///
/// A local maximum counts when it exceeds `prominence * max(rho)`. Two
/// neighbouring peaks stay separate only if the lowest value between them
/// falls below `(1 - prominence)` times the lower peak; otherwise they merge.
pub fn count_modes(rho: &Density, prominence: f64) -> usize {
    let v = rho.values();
    if v.is_empty() {
        return 0;
    }
    let top = rho.max_value();
    if !(top > 0.0) {
        return 0;
    }
    // collapse plateaus to runs, padding both ends with -inf
    let mut runs: Vec<(usize, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        if runs.last().map_or(true, |r| r.1 != x) {
            runs.push((i, x));
        }
    }
    let peaks: Vec<usize> = (0..runs.len())
        .filter(|&k| {
            let left = if k == 0 { f64::NEG_INFINITY } else { runs[k - 1].1 };
            let right = if k + 1 == runs.len() { f64::NEG_INFINITY } else { runs[k + 1].1 };
            runs[k].1 > left && runs[k].1 > right && runs[k].1 > prominence * top
        })
        .map(|k| runs[k].0)
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        match kept.last().copied() {
            None => kept.push(p),
            Some(q) => {
                let dip = v[q..=p].iter().cloned().fold(f64::INFINITY, f64::min);
                if dip < (1.0 - prominence) * v[q].min(v[p]) {
                    kept.push(p);
                } else if v[p] > v[q] {
                    *kept.last_mut().unwrap() = p;
                }
            }
        }
    }
    kept.len()
}

/// Least-squares decay rate of a positive series.
///
/// Fits `log(values)` against `times` over the trailing `window` fraction of
/// the samples, ignoring values below `1e-10` times the series maximum, and
/// returns minus half the slope (so a series `e^{-2 lambda t}` gives
/// `lambda`).
pub fn fit_decay_rate(times: &[f64], values: &[f64], window: f64) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), found: values.len() });
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::param("window", format!("must lie in (0, 1], got {window}")));
    }
    let top = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let floor = 1e-10 * top;
    let start = times.len() - ((window * times.len() as f64).ceil() as usize).min(times.len());
    let pts: Vec<(f64, f64)> = times[start..]
        .iter()
        .zip(&values[start..])
        .filter(|(_, v)| v.is_finite() && **v > floor && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::DecayFit { usable: pts.len() });
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(t, y)| (t - mt) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - mt).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DecayFit { usable: 1 });
    }
    Ok(-0.5 * sxy / sxx + 0.0)
}

/// Whether a decay-rate theorem covers the regime, with its rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Applicability {
    pub applicable: bool,
    /// Theoretical rate (may be non-positive when the hypothesis fails).
    pub lambda: Option<f64>,
    pub reason: String,
}

/// Decay rate promised for the regime: `min(beta, alpha lambda~)` for the
/// aligned flow, `alpha lambda~ - Lambda_1` for the fast classifier and
/// `beta` for the fast population (the logistic costs have `lambda_1 =
/// lambda_2 = 0`).
pub fn theorem_rate(model: &EnergyModel, regime: &Regime) -> Applicability {
    let modulus = model.entropy_modulus();
    let convex = model.cost.is_convex_in_x();
    let no = |lambda: Option<f64>, reason: &str| Applicability { applicable: false, lambda, reason: reason.into() };
    let yes = |lambda: f64, reason: &str| Applicability { applicable: true, lambda: Some(lambda), reason: reason.into() };
    match regime {
        Regime::Aligned => {
            let lambda = modulus.map(|m| model.beta.min(m));
            match (lambda, convex, model.kernel) {
                (None, _, _) => no(None, "reference measure has no known log-concavity constant"),
                (Some(l), false, _) => no(Some(l), "costs are not convex in x"),
                (Some(l), true, crate::model::InteractionKernel::Consensus { .. }) => {
                    no(Some(l), "interaction kernel is not convex")
                }
                (Some(l), true, _) => yes(l, "lambda_a = min(beta, alpha lambda~)"),
            }
        }
        Regime::CompetitiveFastX => match modulus {
            None => no(None, "reference measure has no known log-concavity constant"),
            Some(m) => {
                let l = m - model.cost.hess_z_f1_bound();
                if !model.kernel.is_none() {
                    no(Some(l), "interaction kernel present")
                } else if l > 0.0 {
                    yes(l, "lambda_b = alpha lambda~ - Lambda_1")
                } else {
                    no(Some(l), "hypothesis unmet (alpha lambda~ <= Lambda_1), empirical decay recorded")
                }
            }
        },
        Regime::CompetitiveFastRho => {
            if convex {
                yes(model.beta, "lambda_d = beta")
            } else {
                no(Some(model.beta), "costs are not convex in x")
            }
        }
        _ => no(None, "no decay theorem covers this regime"),
    }
}

/// Per-sample margins of the functional inequalities. A positive margin means
/// the inequality holds without slack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityRow {
    pub t: f64,
    pub relative_energy: f64,
    pub dissipation: f64,
    pub metric: f64,
    pub log_sobolev_margin: f64,
    pub talagrand_margin: f64,
    pub hwi_margin: f64,
    /// `-dG/dt` (or `+dG/dt` for ascending energies) by centered differences.
    pub energy_rate: Option<f64>,
    pub log_sobolev_ok: bool,
    pub talagrand_ok: bool,
    pub hwi_ok: bool,
    pub balance_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub lambda: f64,
    pub slack_rel: f64,
    pub slack_abs: f64,
    pub rows: Vec<InequalityRow>,
    pub log_sobolev: bool,
    pub talagrand: bool,
    pub hwi: bool,
    pub energy_balance: bool,
    /// Fitted rate of the relative energy over the trailing half.
    pub fitted_rate: Option<f64>,
}

impl InequalityReport {
    pub fn all_pass(&self) -> bool {
        self.log_sobolev && self.talagrand && self.hwi && self.energy_balance
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "relative_energy",
            "dissipation",
            "metric",
            "log_sobolev_margin",
            "talagrand_margin",
            "hwi_margin",
            "energy_rate",
            "log_sobolev_ok",
            "talagrand_ok",
            "hwi_ok",
            "balance_ok",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.t),
                format!("{:e}", r.relative_energy),
                format!("{:e}", r.dissipation),
                format!("{:e}", r.metric),
                format!("{:e}", r.log_sobolev_margin),
                format!("{:e}", r.talagrand_margin),
                format!("{:e}", r.hwi_margin),
                r.energy_rate.map_or(String::new(), |v| format!("{v:e}")),
                r.log_sobolev_ok.to_string(),
                r.talagrand_ok.to_string(),
                r.hwi_ok.to_string(),
                r.balance_ok.map_or(String::new(), |b| b.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Orientation of the regime energy: `+1` when it decreases along the flow.
pub fn energy_orientation(regime: &Regime) -> f64 {
    match regime {
        Regime::CompetitiveFastX => -1.0,
        _ => 1.0,
    }
}

/// Distance used by the inequalities for the regime.
fn regime_metric(regime: &Regime, a: &State, b: &State) -> Result<f64> {
    match regime {
        Regime::CompetitiveFastX => wasserstein2_1d(&a.rho, &b.rho),
        Regime::CompetitiveFastRho => Ok(norm(&a.x().iter().zip(b.x()).map(|(p, q)| p - q).collect::<Vec<_>>())),
        _ => joint_metric(&a.rho, a.x(), &b.rho, b.x()),
    }
}

fn holds(margin: f64, scale: f64) -> bool {
    margin >= -(SLACK_REL * scale + SLACK_ABS)
}

/// Inequality report with the terminal sample standing in for the steady
/// state.
pub fn inequality_report(trajectory: &Trajectory, model: &EnergyModel, regime: &Regime, lambda: f64) -> Result<InequalityReport> {
    let last = trajectory.last();
    inequality_report_against(trajectory, model, regime, lambda, &last.state, last.energy)
}

/// Inequality report against a given steady state `target` with energy
/// `target_energy`.
pub fn inequality_report_against(
    trajectory: &Trajectory,
    _model: &EnergyModel,
    regime: &Regime,
    lambda: f64,
    target: &State,
    target_energy: f64,
) -> Result<InequalityReport> {
    if !(lambda > 0.0) {
        return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
    }
    let s = energy_orientation(regime);
    let samples = &trajectory.samples;
    let n = samples.len();
    let d_max = samples.iter().map(|p| p.dissipation).fold(0.0, f64::max);
    let skip = (0.05 * n as f64).ceil() as usize;
    let mut rows = Vec::with_capacity(n);
    for (k, p) in samples.iter().enumerate() {
        let delta = s * (p.energy - target_energy);
        let d = p.dissipation;
        let w = regime_metric(regime, &p.state, target)?;
        let lsi = d - 2.0 * lambda * delta;
        let tal = 2.0 / lambda * delta - w * w;
        let hwi_rhs = w * d.sqrt() - 0.5 * lambda * w * w;
        let hwi = hwi_rhs - delta;
        let energy_rate = (k > 0 && k + 1 < n).then(|| {
            let (a, b) = (&samples[k - 1], &samples[k + 1]);
            -s * (b.energy - a.energy) / (b.t - a.t)
        });
        let balance_ok = energy_rate.filter(|_| k >= skip && d >= 1e-6 * d_max && d > BALANCE_FLOOR).map(|r| (r - d).abs() <= BALANCE_TOL * d);
        rows.push(InequalityRow {
            t: p.t,
            relative_energy: delta,
            dissipation: d,
            metric: w,
            log_sobolev_margin: lsi,
            talagrand_margin: tal,
            hwi_margin: hwi,
            energy_rate,
            log_sobolev_ok: holds(lsi, d.max(2.0 * lambda * delta.abs())),
            talagrand_ok: holds(tal, (w * w).max(2.0 / lambda * delta.abs())),
            hwi_ok: holds(hwi, delta.abs().max(w * d.sqrt()).max(0.5 * lambda * w * w)),
            balance_ok,
        });
    }
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.relative_energy).collect();
    Ok(InequalityReport {
        lambda,
        slack_rel: SLACK_REL,
        slack_abs: SLACK_ABS,
        log_sobolev: rows.iter().all(|r| r.log_sobolev_ok),
        talagrand: rows.iter().all(|r| r.talagrand_ok),
        hwi: rows.iter().all(|r| r.hwi_ok),
        energy_balance: rows.iter().all(|r| r.balance_ok != Some(false)),
        fitted_rate: fit_decay_rate(&times, &gaps, 0.5).ok(),
        rows,
    })
}
