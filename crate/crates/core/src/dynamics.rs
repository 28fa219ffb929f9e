//! Coupled evolution of the population and the classifier.
//!
//! Every regime advances in steps of the configured `dt`. A step is cut into
//! substeps whenever the transport velocity would violate the CFL or
//! positivity limit, and all fields are recomputed at each substep.

use nalgebra::{DMatrix, DVector};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::fv::{self, Direction, FaceVelocities};
use crate::grid::Density;
use crate::model::{EnergyModel, Objective, Reference};

/// Default Newton tolerance on `|grad_x|`.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;
/// Prominence used for the mode counts recorded along a run.
pub const MODE_PROMINENCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    /// Population and classifier descend the same energy.
    Aligned,
    /// Min-max flow; `timescale_ratio` multiplies the population velocity.
    CompetitiveCoupled { timescale_ratio: f64 },
    /// The classifier best-responds at every instant.
    CompetitiveFastX,
    /// The population best-responds at every instant.
    CompetitiveFastRho,
    /// The classifier sits at `fixed_x` and never moves.
    NaiveClassifier { fixed_x: Vec<f64> },
    /// Competitive flow where the classifier only sees `samples` draws from
    /// each population per update.
    SampledGradient { samples: usize, seed: u64, best_response: bool },
    /// Competitive `rho`, aligned `tau` in place of the static population.
    TwoPopulations,
    /// Competitive flow on a plane grid.
    TwoDCompetitive,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Aligned => "aligned",
            Regime::CompetitiveCoupled { .. } => "competitive",
            Regime::CompetitiveFastX => "competitive_fast_x",
            Regime::CompetitiveFastRho => "competitive_fast_rho",
            Regime::NaiveClassifier { .. } => "naive",
            Regime::SampledGradient { .. } => "sampled",
            Regime::TwoPopulations => "two_populations",
            Regime::TwoDCompetitive => "competitive_2d",
        }
    }

    /// Objective of the population `rho`.
    pub fn objective(&self) -> Objective {
        match self {
            Regime::Aligned => Objective::Aligned,
            _ => Objective::Competitive,
        }
    }

    /// Whether `x` follows a gradient (as opposed to being fixed or solved for).
    pub fn evolves_x(&self) -> bool {
        !matches!(self, Regime::NaiveClassifier { .. })
    }

    fn rho_speed(&self) -> f64 {
        match self {
            Regime::CompetitiveCoupled { timescale_ratio } => *timescale_ratio,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Regime::CompetitiveCoupled { timescale_ratio } if !(*timescale_ratio > 0.0 && timescale_ratio.is_finite()) => {
                Err(Error::param("timescale_ratio", format!("must be positive, got {timescale_ratio}")))
            }
            Regime::SampledGradient { samples: 0, .. } => Err(Error::param("samples", "need at least one sample")),
            Regime::NaiveClassifier { fixed_x } if fixed_x.iter().any(|v| !v.is_finite()) => {
                Err(Error::param("fixed_x", "must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// Classifier parameter together with its anchor and penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub x: Vec<f64>,
    pub anchor: Vec<f64>,
    pub beta: f64,
}

impl ClassifierState {
    pub fn new(x: Vec<f64>, model: &EnergyModel) -> Result<Self> {
        if x.len() != model.param_dim() {
            return Err(Error::DimensionMismatch { expected: model.param_dim(), found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("x", "must be finite"));
        }
        Ok(ClassifierState { x, anchor: model.anchor.clone(), beta: model.beta })
    }

    pub fn with_x(&self, x: Vec<f64>) -> Self {
        ClassifierState { x, anchor: self.anchor.clone(), beta: self.beta }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub rho: Density,
    pub classifier: ClassifierState,
    /// Second, aligned population of the two-population regime.
    pub tau: Option<Density>,
}

impl State {
    pub fn x(&self) -> &[f64] {
        &self.classifier.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSettings {
    pub final_time: f64,
    pub dt: f64,
    pub cfl: f64,
    /// Record a sample every this many steps.
    pub sample_stride: usize,
}

impl TimeSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_time >= 0.0 && self.final_time.is_finite()) {
            return Err(Error::param("final_time", format!("must be non-negative, got {}", self.final_time)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::param("cfl", format!("must lie in (0, 1], got {}", self.cfl)));
        }
        if self.sample_stride == 0 {
            return Err(Error::param("sample_stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.final_time / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Everything needed to run one simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: EnergyModel,
    pub regime: Regime,
    pub initial: State,
    pub time: TimeSettings,
    /// Reference measure of `tau` (two-population regime only).
    pub tau_reference: Option<Reference>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        self.time.validate()?;
        self.initial.rho.same_grid(self.model.reference.density())?;
        let dim = self.model.grid().dim();
        let needs_plane = matches!(self.regime, Regime::TwoDCompetitive);
        if needs_plane != (dim == 2) {
            return Err(Error::Unsupported(if needs_plane {
                "the 2D competitive regime needs a plane grid"
            } else {
                "only the 2D competitive regime runs on a plane grid"
            }));
        }
        if let Regime::NaiveClassifier { fixed_x } = &self.regime {
            if fixed_x.len() != self.model.param_dim() {
                return Err(Error::DimensionMismatch { expected: self.model.param_dim(), found: fixed_x.len() });
            }
        }
        if matches!(self.regime, Regime::TwoPopulations) {
            let tau = self.initial.tau.as_ref().ok_or(Error::param("tau", "two populations need an initial tau"))?;
            tau.same_grid(&self.initial.rho)?;
            let r = self.tau_reference.as_ref().ok_or(Error::param("tau_reference", "two populations need a reference"))?;
            r.density().same_grid(&self.initial.rho)?;
        }
        Ok(())
    }
}

/// Diagnostics recorded at one sampled time.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub state: State,
    /// Regime energy: `G_a` (aligned), `G_b` (fast x), `G_d` (fast rho),
    /// classifier loss (two populations), `G_c` otherwise.
    pub energy: f64,
    pub classifier_loss: f64,
    pub population_loss: f64,
    pub dissipation: f64,
    pub residual: f64,
    /// Mode count of `rho` on line grids.
    pub modes: Option<usize>,
    pub mass: f64,
    pub min_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Conservation {
    pub max_step_drift: f64,
    pub cumulative_drift: f64,
    pub min_value: f64,
    pub substeps: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub regime: Regime,
    pub samples: Vec<Sample>,
    pub conservation: Conservation,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.energy).collect()
    }

    pub fn initial(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("a trajectory holds at least the initial sample")
    }
}

/// Settings of the damped Gibbs fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        FixedPointSettings { tol: 1e-9, max_iter: 10_000, damping: 0.5 }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn solve(h: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let d = g.len();
    let m = DMatrix::from_row_slice(d, d, h);
    let chol = m.cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(g)).iter().copied().collect())
}

/// Damped Newton minimization with a backtracking line search. Falls back to
/// the gradient direction where the Hessian is not positive definite.
pub fn newton_minimize(
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    hess: impl Fn(&[f64]) -> Vec<f64>,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut x = start;
    let mut g = grad(&x);
    for _ in 0..max_iter {
        let gn = norm(&g);
        if gn <= tol {
            return Ok(x);
        }
        let p = match solve(&hess(&x), &g) {
            Some(s) if s.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() > 0.0 => s.iter().map(|v| -v).collect(),
            _ => g.iter().map(|v| -v).collect::<Vec<_>>(),
        };
        let slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let f0 = f(&x);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            let gt = grad(&trial);
            // near the minimum f stops resolving the decrease; the gradient still does
            if f(&trial) <= f0 + 1e-4 * t * slope || norm(&gt) <= 0.5 * gn {
                x = trial;
                g = gt;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                x = trial;
                g = gt;
                break;
            }
        }
    }
    let residual = norm(&g);
    if residual <= tol {
        Ok(x)
    } else {
        Err(Error::NewtonDiverged { iterations: max_iter, residual })
    }
}

/// `b(rho) = argmin_x G_c(rho, x)` by damped Newton with Jacobian
/// `Q = beta Id + int hess_x f1 drho + int hess_x f2 drho_bar`. The result is
/// checked against the a-priori bound on best responses.
pub fn best_response_x(rho: &Density, model: &EnergyModel, tol: f64, start: Option<&[f64]>) -> Result<Vec<f64>> {
    best_response_x_with(rho, &model.static_population, model, tol, start)
}

/// First variation of the best response at `x = b(rho)`: the per-cell vector
/// `-Q(rho)^{-1} grad_x f1(z, x)`, so that
/// `d/de b(rho + e psi) = sum_i variation[i] psi_i dV` for mean-zero `psi`.
pub fn best_response_variation(rho: &Density, x: &[f64], model: &EnergyModel) -> Result<Vec<Vec<f64>>> {
    let q = model.hess_x_energy(rho, x);
    let grid = model.grid();
    grid.centers()
        .map(|z| {
            let g = model.cost.grad_x_f1(z, x);
            solve(&q, &g)
                .map(|s| s.iter().map(|v| -v).collect())
                .ok_or(Error::NewtonDiverged { iterations: 0, residual: f64::NAN })
        })
        .collect()
}

fn best_response_x_with(
    rho: &Density,
    other: &Density,
    model: &EnergyModel,
    tol: f64,
    start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be positive, got {tol}")));
    }
    let x0 = start.map(<[f64]>::to_vec).unwrap_or_else(|| model.anchor.clone());
    let x = newton_minimize(
        |x| model.classifier_loss_with(rho, other, x),
        |x| model.grad_x_with(rho, other, x),
        |x| model.hess_x_with(rho, other, x),
        x0,
        tol,
        NEWTON_MAX_ITER,
    )?;
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    let bound = model.best_response_bound();
    if norm_sq > bound * (1.0 + 1e-12) {
        return Err(Error::BestResponseBound { norm_sq, bound });
    }
    Ok(x)
}

/// Normalized `rho~ exp(sign (f1 - s W*rho) / alpha)` on the grid, where
/// `s` and `sign` follow the objective.
fn gibbs(model: &EnergyModel, f1: &[f64], interaction: Option<&[f64]>, objective: Objective) -> Density {
    let (sign, w_sign) = match objective {
        Objective::Competitive => (1.0, -1.0),
        Objective::Aligned => (-1.0, 1.0),
    };
    let logs = model.reference.log_values();
    let mut l: Vec<f64> = match interaction {
        Some(w) => logs.iter().zip(f1).zip(w).map(|((lr, f), w)| lr + sign * (f + w_sign * w) / model.alpha).collect(),
        None => logs.iter().zip(f1).map(|(lr, f)| lr + sign * f / model.alpha).collect(),
    };
    let grid = model.grid();
    let top = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + l.iter().map(|v| (v - top).exp()).sum::<f64>().ln() + grid.cell_volume().ln();
    for v in l.iter_mut() {
        *v = (*v - lse).exp();
    }
    Density::from_raw(grid.clone(), l)
}

fn l1(a: &Density, b: &Density) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.grid().cell_volume()
}

/// Population best response for the given objective: the minimizer of
/// `G_a(., x)` (aligned) or maximizer of `G_c(., x)` (competitive).
pub fn population_response(
    x: &[f64],
    model: &EnergyModel,
    objective: Objective,
    settings: FixedPointSettings,
    warm: Option<&Density>,
) -> Result<Density> {
    let f1 = model.f1_field(x);
    if model.kernel.is_none() {
        return Ok(gibbs(model, &f1, None, objective));
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::param("damping", format!("must lie in (0, 1], got {}", settings.damping)));
    }
    let mut rho = match warm {
        Some(w) => w.clone(),
        None => gibbs(model, &f1, None, objective),
    };
    let theta = settings.damping;
    let mut change = f64::INFINITY;
    for _ in 0..settings.max_iter {
        let target = gibbs(model, &f1, Some(&model.interaction(&rho)), objective);
        change = l1(&target, &rho);
        if change <= settings.tol {
            return Ok(target);
        }
        let mixed = rho.values().iter().zip(target.values()).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
        rho = Density::from_raw(rho.grid().clone(), mixed);
    }
    Err(Error::FixedPointDiverged { iterations: settings.max_iter, residual: change })
}

/// `r(x) = argmax_rho G_c(rho, x)`, the Gibbs density
/// `rho ∝ rho~ exp((f1(., x) - W*rho) / alpha)`.
pub fn best_response_rho(
    x: &[f64],
    model: &EnergyModel,
    settings: FixedPointSettings,
    warm: Option<&Density>,
) -> Result<Density> {
    if !(model.alpha > 0.0) {
        return Err(Error::param("alpha", "must be positive"));
    }
    population_response(x, model, Objective::Competitive, settings, warm)
}

/// Derived seed for draw `k` of a sampled run.
fn stream_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Monte Carlo estimate of `grad_x G_c` from `n` draws of each population,
/// with per-component standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGradient {
    pub gradient: Vec<f64>,
    pub std_error: Vec<f64>,
}

pub fn sampled_gradient_stats(
    rho: &Density,
    other: &Density,
    x: &[f64],
    model: &EnergyModel,
    n: usize,
    seed: u64,
) -> Result<SampledGradient> {
    if n == 0 {
        return Err(Error::param("samples", "need at least one sample"));
    }
    let d = model.param_dim();
    let zs = rho.sample(n, stream_seed(seed, 0));
    let zbar = other.sample(n, stream_seed(seed, 1));
    let mut gradient = vec![0.0; d];
    let mut std_error = vec![0.0; d];
    for (pts, second) in [(&zs, false), (&zbar, true)] {
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for z in pts.points() {
            let mut g = vec![0.0; d];
            model.cost.add_grad_x(second, z, x, 1.0, &mut g);
            for k in 0..d {
                sum[k] += g[k];
                sum_sq[k] += g[k] * g[k];
            }
        }
        let nf = n as f64;
        for k in 0..d {
            let mean = sum[k] / nf;
            gradient[k] += mean;
            if n > 1 {
                let var = ((sum_sq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0);
                std_error[k] += var / nf;
            }
        }
    }
    for k in 0..d {
        gradient[k] += model.beta * (x[k] - model.anchor[k]);
        std_error[k] = std_error[k].sqrt();
    }
    Ok(SampledGradient { gradient, std_error })
}

/// `(1/n) sum (grad_x f1(z_i, x) + grad_x f2(zbar_i, x)) + beta (x - x0)` with
/// `z_i ~ rho`, `zbar_i ~ other`.
pub fn sampled_gradient(
    rho: &Density,
    other: &Density,
    x: &[f64],
    model: &EnergyModel,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(sampled_gradient_stats(rho, other, x, model, n, seed)?.gradient)
}

/// Minimizer of the sampled classifier loss.
fn sampled_best_response(
    rho: &Density,
    other: &Density,
    model: &EnergyModel,
    n: usize,
    seed: u64,
    start: &[f64],
) -> Result<Vec<f64>> {
    let zs = rho.sample(n, stream_seed(seed, 0));
    let zbar = other.sample(n, stream_seed(seed, 1));
    let d = model.param_dim();
    let w = 1.0 / n as f64;
    let cost = model.cost;
    let f = |x: &[f64]| {
        zs.points().map(|z| cost.f1(z, x)).sum::<f64>() * w + zbar.points().map(|z| cost.f2(z, x)).sum::<f64>() * w
            + model.penalty(x)
    };
    let grad = |x: &[f64]| {
        let mut g = vec![0.0; d];
        zs.points().for_each(|z| cost.add_grad_x(false, z, x, w, &mut g));
        zbar.points().for_each(|z| cost.add_grad_x(true, z, x, w, &mut g));
        for k in 0..d {
            g[k] += model.beta * (x[k] - model.anchor[k]);
        }
        g
    };
    let hess = |x: &[f64]| {
        let mut h = vec![0.0; d * d];
        zs.points().for_each(|z| cost.add_hess_x(false, z, x, w, &mut h));
        zbar.points().for_each(|z| cost.add_hess_x(true, z, x, w, &mut h));
        for k in 0..d {
            h[k * d + k] += model.beta;
        }
        h
    };
    newton_minimize(f, grad, hess, start.to_vec(), NEWTON_TOL, NEWTON_MAX_ITER)
}

/// First-variation field driving `rho`, its direction and velocity scale.
pub(crate) fn rho_drive(model: &EnergyModel, regime: &Regime, state: &State) -> (Vec<f64>, Direction, f64) {
    let objective = regime.objective();
    let xi = model.first_variation(&state.rho, state.x(), objective);
    let dir = match objective {
        Objective::Aligned => Direction::Descent,
        Objective::Competitive => Direction::Ascent,
    };
    (xi, dir, regime.rho_speed())
}

/// `f2 + alpha log(tau / tau~) + W*tau`, the field driving `tau` down.
pub(crate) fn tau_field(model: &EnergyModel, reference: &Reference, tau: &Density, x: &[f64]) -> Vec<f64> {
    let mut field = model.f2_field(x);
    for (f, l) in field.iter_mut().zip(reference.log_ratio(tau)) {
        *f += model.alpha * l;
    }
    if !model.kernel.is_none() {
        for (f, w) in field.iter_mut().zip(model.interaction(tau)) {
            *f += w;
        }
    }
    field
}

/// Exact `grad_x` of the classifier objective in the current state.
pub(crate) fn classifier_gradient(model: &EnergyModel, state: &State) -> Vec<f64> {
    match &state.tau {
        Some(tau) => model.grad_x_with(&state.rho, tau, state.x()),
        None => model.grad_x_energy(&state.rho, state.x()),
    }
}

struct Velocities {
    rho: FaceVelocities,
    tau: Option<FaceVelocities>,
}

impl Velocities {
    fn admissible(&self, cfl: f64) -> Result<f64> {
        let mut h = fv::cfl_dt(&self.rho, cfl)?.min(fv::positivity_dt(&self.rho));
        if let Some(t) = &self.tau {
            h = h.min(fv::cfl_dt(t, cfl)?).min(fv::positivity_dt(t));
        }
        Ok(h)
    }
}

/// Drives one simulation forward.
struct Stepper<'a> {
    scenario: &'a Scenario,
    fixed_point: FixedPointSettings,
    substep: u64,
    conservation: Conservation,
}

impl<'a> Stepper<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        Stepper {
            scenario,
            fixed_point: FixedPointSettings::default(),
            substep: 0,
            conservation: Conservation { min_value: f64::INFINITY, ..Default::default() },
        }
    }

    fn model(&self) -> &EnergyModel {
        &self.scenario.model
    }

    /// Brings a fresh state in line with the regime (best responses solved,
    /// fixed parameters applied).
    fn prepare(&self, state: State) -> Result<State> {
        let model = self.model();
        match &self.scenario.regime {
            Regime::CompetitiveFastX => {
                let x = best_response_x(&state.rho, model, NEWTON_TOL, Some(state.x()))?;
                Ok(State { classifier: state.classifier.with_x(x), ..state })
            }
            Regime::CompetitiveFastRho => {
                let rho = best_response_rho(state.x(), model, self.fixed_point, Some(&state.rho))?;
                Ok(State { rho, ..state })
            }
            Regime::NaiveClassifier { fixed_x } => {
                Ok(State { classifier: state.classifier.with_x(fixed_x.clone()), ..state })
            }
            _ => Ok(state),
        }
    }

    fn velocities(&self, state: &State) -> Result<Velocities> {
        let model = self.model();
        let (xi, dir, speed) = rho_drive(model, &self.scenario.regime, state);
        let mut rho = fv::face_velocities(&xi, state.rho.grid(), dir)?;
        if speed != 1.0 {
            rho.scale(speed);
        }
        let tau = match (&state.tau, &self.scenario.tau_reference) {
            (Some(tau), Some(reference)) => {
                let field = tau_field(model, reference, tau, state.x());
                Some(fv::face_velocities(&field, tau.grid(), Direction::Descent)?)
            }
            _ => None,
        };
        Ok(Velocities { rho, tau })
    }

    fn x_gradient(&self, state: &State) -> Result<Vec<f64>> {
        match &self.scenario.regime {
            Regime::SampledGradient { samples, seed, best_response: false } => sampled_gradient(
                &state.rho,
                &self.model().static_population,
                state.x(),
                self.model(),
                *samples,
                stream_seed(*seed, self.substep + 2),
            ),
            _ => Ok(classifier_gradient(self.model(), state)),
        }
    }

    fn record(&mut self, report: &fv::StepReport) {
        let c = &mut self.conservation;
        c.max_step_drift = c.max_step_drift.max(report.mass_drift.abs());
        c.min_value = c.min_value.min(report.min_value);
    }

    /// Advances by at most `dt`; returns the time actually covered.
    fn substep(&mut self, state: &State, dt: f64) -> Result<(State, f64)> {
        let scenario = self.scenario;
        let model = &scenario.model;
        let regime = &scenario.regime;
        let cfl = scenario.time.cfl;
        let next = match regime {
            Regime::CompetitiveFastRho => {
                let h = dt;
                let g = classifier_gradient(model, state);
                let x: Vec<f64> = state.x().iter().zip(&g).map(|(a, b)| a - h * b).collect();
                let rho = best_response_rho(&x, model, self.fixed_point, Some(&state.rho))?;
                let next = State { rho, classifier: state.classifier.with_x(x), tau: None };
                (next, h)
            }
            _ => {
                let v = self.velocities(state)?;
                let h = dt.min(v.admissible(cfl)?);
                let (rho, rep) = fv::step(&state.rho, &v.rho, h)?;
                self.record(&rep);
                let tau = match (&state.tau, &v.tau) {
                    (Some(t), Some(u)) => {
                        let (t2, rep) = fv::step(t, u, h)?;
                        self.record(&rep);
                        Some(t2)
                    }
                    _ => state.tau.clone(),
                };
                let x = match regime {
                    Regime::NaiveClassifier { fixed_x } => fixed_x.clone(),
                    Regime::CompetitiveFastX => {
                        best_response_x(&rho, model, NEWTON_TOL, Some(state.x()))?
                    }
                    Regime::SampledGradient { samples, seed, best_response: true } => sampled_best_response(
                        &rho,
                        &model.static_population,
                        model,
                        *samples,
                        stream_seed(*seed, self.substep + 2),
                        state.x(),
                    )?,
                    _ => {
                        let g = self.x_gradient(state)?;
                        state.x().iter().zip(&g).map(|(a, b)| a - h * b).collect()
                    }
                };
                (State { rho, classifier: state.classifier.with_x(x), tau }, h)
            }
        };
        self.substep += 1;
        self.conservation.substeps += 1;
        Ok(next)
    }

    /// Advances by exactly `dt`, subcycling as needed.
    fn advance(&mut self, state: State, dt: f64) -> Result<State> {
        let mut state = state;
        let mut covered = 0.0;
        while covered < dt * (1.0 - 1e-12) {
            let (next, h) = self.substep(&state, dt - covered)?;
            state = next;
            covered += h;
        }
        Ok(state)
    }

    fn sample(&self, t: f64, state: &State) -> Sample {
        let model = self.model();
        let regime = &self.scenario.regime;
        let x = state.x();
        let (energy, classifier_loss) = match &state.tau {
            Some(tau) => {
                let l = model.classifier_loss_with(&state.rho, tau, x);
                (l, l)
            }
            None => {
                let e = match regime {
                    Regime::Aligned => model.energy_aligned(&state.rho, x),
                    _ => model.energy_competitive(&state.rho, x),
                };
                (e, model.classifier_loss(&state.rho, x))
            }
        };
        Sample {
            t,
            state: state.clone(),
            energy,
            classifier_loss,
            population_loss: model.population_loss(&state.rho, x),
            dissipation: diagnostics::dissipation_with(model, regime, state, self.scenario.tau_reference.as_ref()),
            residual: diagnostics::residual_with(model, regime, state, self.scenario.tau_reference.as_ref()),
            modes: (state.rho.grid().dim() == 1).then(|| diagnostics::count_modes(&state.rho, MODE_PROMINENCE)),
            mass: state.rho.mass(),
            min_value: state.rho.min_value(),
        }
    }
}

/// One explicit step of size `dt` of the scenario's regime, without
/// subcycling. Fails with a CFL violation when `dt` exceeds the admissible
/// step of the current state.
pub fn step_coupled(state: &State, scenario: &Scenario, dt: f64) -> Result<State> {
    let mut stepper = Stepper::new(scenario);
    if !matches!(scenario.regime, Regime::CompetitiveFastRho) {
        let admissible = stepper.velocities(state)?.admissible(1.0)?;
        if dt > admissible {
            return Err(Error::CflViolation { dt, admissible });
        }
    }
    Ok(stepper.substep(state, dt)?.0)
}

/// Runs the scenario to its final time.
pub fn run(scenario: &Scenario) -> Result<Trajectory> {
    scenario.validate()?;
    let mut stepper = Stepper::new(scenario);
    let time = scenario.time;
    let wrap = |step: usize| move |e: Error| Error::Step { step, source: Box::new(e) };
    let mut state = stepper.prepare(scenario.initial.clone()).map_err(wrap(0))?;
    let initial_mass = state.rho.mass() + state.tau.as_ref().map_or(0.0, Density::mass);
    let mut samples = vec![stepper.sample(0.0, &state)];
    let steps = time.steps();
    for k in 0..steps {
        let t0 = k as f64 * time.dt;
        let dt = time.dt.min(time.final_time - t0);
        state = stepper.advance(state, dt).map_err(wrap(k + 1))?;
        if (k + 1) % time.sample_stride == 0 || k + 1 == steps {
            let t = if k + 1 == steps { time.final_time } else { (k + 1) as f64 * time.dt };
            samples.push(stepper.sample(t, &state));
        }
    }
    let final_mass = state.rho.mass() + state.tau.as_ref().map_or(0.0, Density::mass);
    let mut conservation = stepper.conservation;
    conservation.cumulative_drift = (final_mass - initial_mass).abs();
    if conservation.min_value == f64::INFINITY {
        conservation.min_value = samples.iter().map(|s| s.min_value).fold(f64::INFINITY, f64::min);
    }
    Ok(Trajectory { regime: scenario.regime.clone(), samples, conservation })
}

/// Runs the two-population regime: `rho` competitive, `tau` aligned, shared
/// classifier.
pub fn run_two_populations(scenario: &Scenario) -> Result<Trajectory> {
    if !matches!(scenario.regime, Regime::TwoPopulations) {
        return Err(Error::Unsupported("run_two_populations needs the two-population regime"));
    }
    run(scenario)
}

/// Joint steady state `(rho*, x*)`: `x*` minimizes the envelope
/// `x -> G(r(x), x)` where `r` is the population response of the objective.
/// Solved by Newton on the envelope gradient with a finite-difference Hessian.
pub fn equilibrium(model: &EnergyModel, objective: Objective, start: &[f64]) -> Result<(Density, Vec<f64>)> {
    let settings = FixedPointSettings { tol: 1e-12, ..Default::default() };
    let respond = |x: &[f64]| population_response(x, model, objective, settings, None);
    let envelope_grad = |x: &[f64]| -> Result<Vec<f64>> {
        let rho = respond(x)?;
        Ok(model.grad_x_energy(&rho, x))
    };
    let d = model.param_dim();
    let mut x = start.to_vec();
    let mut g = envelope_grad(&x)?;
    for _ in 0..NEWTON_MAX_ITER {
        if norm(&g) <= NEWTON_TOL {
            return Ok((respond(&x)?, x));
        }
        let h = 1e-6;
        let mut jac = vec![0.0; d * d];
        for k in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let (gp, gm) = (envelope_grad(&xp)?, envelope_grad(&xm)?);
            for r in 0..d {
                jac[r * d + k] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        let sym: Vec<f64> = (0..d * d).map(|i| 0.5 * (jac[i] + jac[(i % d) * d + i / d])).collect();
        let p: Vec<f64> = match solve(&sym, &g) {
            Some(s) => s.iter().map(|v| -v).collect(),
            None => g.iter().map(|v| -v / model.beta).collect(),
        };
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            let gt = envelope_grad(&trial)?;
            if norm(&gt) < norm(&g) || t < 1e-8 {
                x = trial;
                g = gt;
                break;
            }
            t *= 0.5;
        }
    }
    let residual = norm(&g);
    if residual <= 1e-8 {
        Ok((respond(&x)?, x))
    } else {
        Err(Error::NewtonDiverged { iterations: NEWTON_MAX_ITER, residual })
    }
}

/// Fresh state with `rho`, classifier parameter `x` and optional `tau`.
pub fn initial_state(model: &EnergyModel, rho: Density, x: Vec<f64>, tau: Option<Density>) -> Result<State> {
    Ok(State { rho, classifier: ClassifierState::new(x, model)?, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::{Cost, Gaussian, InteractionKernel};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn line(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
        Arc::new(Grid::line(lo, hi, n).unwrap())
    }

    fn competitive_model(cost: Cost, kernel: InteractionKernel) -> EnergyModel {
        let g = line(-4.0, 6.0, 200);
        let reference = Reference::gaussian(g.clone(), Gaussian::isotropic(vec![-0.5], 0.07).unwrap()).unwrap();
        let other = Density::gaussian(g, &[1.0], &[0.25]).unwrap();
        EnergyModel::new(cost, kernel, reference, other, 0.1, 0.05, vec![1.5]).unwrap()
    }

    fn scenario(model: EnergyModel, regime: Regime, final_time: f64) -> Scenario {
        let rho = Density::gaussian(model.grid().clone(), &[0.0], &[0.25]).unwrap();
        let initial = initial_state(&model, rho, vec![1.5], None).unwrap();
        Scenario {
            model,
            regime,
            initial,
            time: TimeSettings { final_time, dt: 0.01, cfl: 0.5, sample_stride: 10 },
            tau_reference: None,
        }
    }

    #[test]
    fn newton_with_zero_costs_returns_anchor() {
        let m = competitive_model(Cost::Zero { dim: 1 }, InteractionKernel::None);
        let rho = m.static_population.clone();
        let x = best_response_x(&rho, &m, NEWTON_TOL, Some(&[-3.0])).unwrap();
        assert_abs_diff_eq!(x[0], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn newton_reaches_tolerance() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let rho = Density::gaussian(m.grid().clone(), &[0.0], &[0.25]).unwrap();
        let x = best_response_x(&rho, &m, NEWTON_TOL, None).unwrap();
        assert!(m.grad_x_energy(&rho, &x)[0].abs() <= NEWTON_TOL);
        // symmetric populations around 0.5 put the threshold at b * 0.5
        assert_abs_diff_eq!(x[0], 1.5, epsilon = 1e-8);
    }

    #[test]
    fn gibbs_with_zero_costs_is_reference() {
        let m = competitive_model(Cost::Zero { dim: 1 }, InteractionKernel::None);
        let r = best_response_rho(&[0.0], &m, FixedPointSettings::default(), None).unwrap();
        for (a, b) in r.values().iter().zip(m.reference.density().values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn gibbs_fixed_point_converges_with_kernel() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::Consensus { scale: 0.05 });
        let s = FixedPointSettings::default();
        let r = best_response_rho(&[1.7], &m, s, None).unwrap();
        let again = gibbs(&m, &m.f1_field(&[1.7]), Some(&m.interaction(&r)), Objective::Competitive);
        assert!(l1(&r, &again) <= 10.0 * s.tol);
    }

    #[test]
    fn fixed_point_reports_divergence() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::Consensus { scale: 0.05 });
        let s = FixedPointSettings { tol: 1e-30, max_iter: 3, damping: 0.5 };
        assert!(matches!(best_response_rho(&[1.7], &m, s, None), Err(Error::FixedPointDiverged { iterations: 3, .. })));
    }

    #[test]
    fn sampled_gradient_is_deterministic_and_exact_without_costs() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let rho = Density::gaussian(m.grid().clone(), &[0.0], &[0.25]).unwrap();
        let a = sampled_gradient(&rho, &m.static_population, &[1.2], &m, 7, 99).unwrap();
        let b = sampled_gradient(&rho, &m.static_population, &[1.2], &m, 7, 99).unwrap();
        assert_eq!(a, b);
        let z = competitive_model(Cost::Zero { dim: 1 }, InteractionKernel::None);
        let g = sampled_gradient(&rho, &z.static_population, &[1.2], &z, 3, 5).unwrap();
        assert_eq!(g, vec![z.beta * (1.2 - 1.5)]);
    }

    #[test]
    fn zero_time_run_has_single_sample() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let s = scenario(m, Regime::CompetitiveCoupled { timescale_ratio: 1.0 }, 0.0);
        let traj = run(&s).unwrap();
        assert_eq!(traj.samples.len(), 1);
        assert_eq!(traj.samples[0].state, s.initial);
    }

    #[test]
    fn naive_keeps_x_fixed() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let s = scenario(m, Regime::NaiveClassifier { fixed_x: vec![2.2] }, 1.0);
        let traj = run(&s).unwrap();
        assert!(traj.samples.iter().all(|s| s.state.x() == [2.2]));
    }

    #[test]
    fn aligned_step_decreases_energy() {
        let g = line(-4.0, 6.0, 100);
        let reference = Reference::gaussian(g.clone(), Gaussian::isotropic(vec![0.0], 0.25).unwrap()).unwrap();
        let other = Density::gaussian(g.clone(), &[1.0], &[0.25]).unwrap();
        let m = EnergyModel::new(Cost::logistic(3.0).unwrap(), InteractionKernel::None, reference, other, 0.1, 1.0, vec![1.5])
            .unwrap();
        let s = scenario(m, Regime::Aligned, 1.0);
        let before = s.model.energy_aligned(&s.initial.rho, s.initial.x());
        let next = step_coupled(&s.initial, &s, 0.001).unwrap();
        let after = s.model.energy_aligned(&next.rho, next.x());
        assert!(after <= before + 1e-6, "{after} > {before}");
    }

    #[test]
    fn oversized_step_is_rejected() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let s = scenario(m, Regime::CompetitiveCoupled { timescale_ratio: 1.0 }, 1.0);
        assert!(matches!(step_coupled(&s.initial, &s, 10.0), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let m = competitive_model(Cost::logistic(3.0).unwrap(), InteractionKernel::None);
        let (rho, x) = equilibrium(&m, Objective::Competitive, &[1.5]).unwrap();
        assert!(m.grad_x_energy(&rho, &x)[0].abs() <= 1e-9);
        let s = scenario(m, Regime::CompetitiveCoupled { timescale_ratio: 1.0 }, 1.0);
        let state = initial_state(&s.model, rho.clone(), x.clone(), None).unwrap();
        let next = step_coupled(&state, &s, 0.001).unwrap();
        assert_abs_diff_eq!(next.x()[0], x[0], epsilon = 1e-8);
        assert!(l1(&next.rho, &rho) <= 1e-8);
    }
}
