//! Costs, interaction kernels, the reference measure and the energies built
//! from them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{gaussian_log_kernel, Density, Grid};

/// Floor applied to density values inside logarithms only.
pub const MASS_FLOOR: f64 = 1e-12;

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s)` without overflow.
#[inline]
pub fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid_prime(s: f64) -> f64 {
    sigmoid(s) * sigmoid(-s)
}

#[inline]
fn sigmoid_second(s: f64) -> f64 {
    sigmoid_prime(s) * (1.0 - 2.0 * sigmoid(s))
}

#[inline]
fn floored_ln(v: f64) -> f64 {
    v.max(MASS_FLOOR).ln()
}

/// Classifier cost pair `(f1, f2)`.
///
/// `Logistic` is the scalar threshold classifier with label probability
/// `q = sigmoid(b z - x)`, `f1 = -log(1 - q)`, `f2 = -log q`. `Logistic2d` is
/// the bilinear variant `f1 = sigmoid(x.z) / 2`, `f2 = sigmoid(-x.z) / 2`.
/// `Zero` switches both costs off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Logistic { slope: f64 },
    Logistic2d,
    Zero { dim: usize },
}

impl Cost {
    pub fn logistic(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::param("slope", format!("must be positive, got {slope}")));
        }
        Ok(Cost::Logistic { slope })
    }

    /// Dimension of the attribute space `z`.
    pub fn space_dim(&self) -> usize {
        match *self {
            Cost::Logistic { .. } => 1,
            Cost::Logistic2d => 2,
            Cost::Zero { dim } => dim,
        }
    }

    /// Dimension of the classifier parameter `x`.
    pub fn param_dim(&self) -> usize {
        self.space_dim()
    }

    #[inline]
    fn logit(&self, z: &[f64], x: &[f64]) -> f64 {
        match *self {
            Cost::Logistic { slope } => slope * z[0] - x[0],
            Cost::Logistic2d => z[0] * x[0] + z[1] * x[1],
            Cost::Zero { .. } => 0.0,
        }
    }

    pub fn f1(&self, z: &[f64], x: &[f64]) -> f64 {
        let s = self.logit(z, x);
        match self {
            Cost::Logistic { .. } => softplus(s),
            Cost::Logistic2d => 0.5 * sigmoid(s),
            Cost::Zero { .. } => 0.0,
        }
    }

    pub fn f2(&self, z: &[f64], x: &[f64]) -> f64 {
        let s = self.logit(z, x);
        match self {
            Cost::Logistic { .. } => softplus(-s),
            Cost::Logistic2d => 0.5 * sigmoid(-s),
            Cost::Zero { .. } => 0.0,
        }
    }

    /// Adds `w * grad_x f1(z, x)` (or `f2` when `second`) to `out`.
    pub(crate) fn add_grad_x(&self, second: bool, z: &[f64], x: &[f64], w: f64, out: &mut [f64]) {
        let s = self.logit(z, x);
        match self {
            Cost::Logistic { .. } => {
                out[0] += w * if second { sigmoid(-s) } else { -sigmoid(s) };
            }
            Cost::Logistic2d => {
                let g = 0.5 * sigmoid_prime(s) * if second { -1.0 } else { 1.0 };
                out[0] += w * g * z[0];
                out[1] += w * g * z[1];
            }
            Cost::Zero { .. } => {}
        }
    }

    /// Adds `w * hess_x f1(z, x)` (or `f2`) to the row-major matrix `out`.
    pub(crate) fn add_hess_x(&self, second: bool, z: &[f64], x: &[f64], w: f64, out: &mut [f64]) {
        let s = self.logit(z, x);
        match self {
            Cost::Logistic { .. } => out[0] += w * sigmoid_prime(s),
            Cost::Logistic2d => {
                let h = 0.5 * if second { sigmoid_second(-s) } else { sigmoid_second(s) };
                for a in 0..2 {
                    for b in 0..2 {
                        out[2 * a + b] += w * h * z[a] * z[b];
                    }
                }
            }
            Cost::Zero { .. } => {}
        }
    }

    fn grad_z(&self, second: bool, z: &[f64], x: &[f64]) -> Vec<f64> {
        let s = self.logit(z, x);
        match *self {
            Cost::Logistic { slope } => vec![if second { -slope * sigmoid(-s) } else { slope * sigmoid(s) }],
            Cost::Logistic2d => {
                let g = 0.5 * sigmoid_prime(s) * if second { -1.0 } else { 1.0 };
                vec![g * x[0], g * x[1]]
            }
            Cost::Zero { dim } => vec![0.0; dim],
        }
    }

    fn hess_z(&self, second: bool, z: &[f64], x: &[f64]) -> Vec<f64> {
        let s = self.logit(z, x);
        match *self {
            Cost::Logistic { slope } => vec![slope * slope * sigmoid_prime(s)],
            Cost::Logistic2d => {
                let h = 0.5 * if second { sigmoid_second(-s) } else { sigmoid_second(s) };
                vec![h * x[0] * x[0], h * x[0] * x[1], h * x[1] * x[0], h * x[1] * x[1]]
            }
            Cost::Zero { dim } => vec![0.0; dim * dim],
        }
    }

    pub fn grad_x_f1(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim()];
        self.add_grad_x(false, z, x, 1.0, &mut g);
        g
    }

    pub fn grad_x_f2(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim()];
        self.add_grad_x(true, z, x, 1.0, &mut g);
        g
    }

    pub fn hess_x_f1(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.param_dim();
        let mut h = vec![0.0; d * d];
        self.add_hess_x(false, z, x, 1.0, &mut h);
        h
    }

    pub fn hess_x_f2(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.param_dim();
        let mut h = vec![0.0; d * d];
        self.add_hess_x(true, z, x, 1.0, &mut h);
        h
    }

    pub fn grad_z_f1(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.grad_z(false, z, x)
    }

    pub fn grad_z_f2(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.grad_z(true, z, x)
    }

    pub fn hess_z_f1(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.hess_z(false, z, x)
    }

    pub fn hess_z_f2(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.hess_z(true, z, x)
    }

    /// Constants `(a1, a2)` bounding `-x . grad_x f_i(z, x)` from above for
    /// every `x` and every `z` in the box of `grid`.
    pub fn growth_bounds(&self, grid: &Grid) -> (f64, f64) {
        match *self {
            Cost::Logistic { slope } => {
                let a = grid.axis(0);
                // -x df1/dx = x sigmoid(bz - x), largest at the top of the box
                (peak_of_shifted_ramp(slope * a.upper), peak_of_shifted_ramp(-slope * a.lower))
            }
            Cost::Logistic2d => {
                // -x . grad_x f1 = -u sigmoid'(u) / 2 with u = x.z
                let m = 0.5 * max_u_sigmoid_prime();
                (m, m)
            }
            Cost::Zero { .. } => (0.0, 0.0),
        }
    }

    /// Upper bound on the largest eigenvalue of `hess_z f1` over the box.
    pub fn hess_z_f1_bound(&self) -> f64 {
        match *self {
            Cost::Logistic { slope } => slope * slope / 4.0,
            Cost::Logistic2d => f64::INFINITY,
            Cost::Zero { .. } => 0.0,
        }
    }

    /// True when both costs are convex in `x`.
    pub fn is_convex_in_x(&self) -> bool {
        !matches!(self, Cost::Logistic2d)
    }
}

/// `max_{x} x sigmoid(c - x)`, found by golden-section search.
fn peak_of_shifted_ramp(c: f64) -> f64 {
    let f = |x: f64| x * sigmoid(c - x);
    golden_max(f, 0.0, c.max(0.0) + 60.0)
}

fn max_u_sigmoid_prime() -> f64 {
    golden_max(|u| u * sigmoid_prime(u), 0.0, 60.0)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    for _ in 0..200 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    f(0.5 * (a + b)).max(0.0)
}

/// Symmetric interaction potential `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InteractionKernel {
    None,
    /// `W(z) = weight |z|^2 / 2`
    Quadratic { weight: f64 },
    /// `W(z) = scale / (1 + |z|)`
    Consensus { scale: f64 },
}

impl InteractionKernel {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            InteractionKernel::None => 0.0,
            InteractionKernel::Quadratic { weight } => 0.5 * weight * z.iter().map(|c| c * c).sum::<f64>(),
            InteractionKernel::Consensus { scale } => scale / (1.0 + z.iter().map(|c| c * c).sum::<f64>().sqrt()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, InteractionKernel::None)
    }

    /// `(W * rho)(z_i) = sum_j W(z_i - z_j) rho_j dV` by direct quadrature.
    pub fn convolve(&self, rho: &Density) -> Vec<f64> {
        let grid = rho.grid();
        let n = grid.len();
        if self.is_none() {
            return vec![0.0; n];
        }
        let dv = grid.cell_volume();
        let values = rho.values();
        match grid.dim() {
            1 => {
                let h = grid.axis(0).width();
                // table[k] = W((k - (n - 1)) h)
                let table: Vec<f64> = (0..2 * n - 1).map(|k| self.eval(&[(k as f64 - (n - 1) as f64) * h])).collect();
                (0..n)
                    .map(|i| {
                        let row = &table[n - 1 - i..2 * n - 1 - i];
                        // row[j] = W(z_j - z_i) = W(z_i - z_j)
                        row.iter().zip(values).map(|(w, r)| w * r).sum::<f64>() * dv
                    })
                    .collect()
            }
            _ => {
                let (ax, ay) = (grid.axis(0), grid.axis(1));
                let (nx, ny) = (ax.cells, ay.cells);
                let (hx, hy) = (ax.width(), ay.width());
                let wy = 2 * ny - 1;
                let mut table = vec![0.0; (2 * nx - 1) * wy];
                for a in 0..2 * nx - 1 {
                    for b in 0..wy {
                        let dz = [(a as f64 - (nx - 1) as f64) * hx, (b as f64 - (ny - 1) as f64) * hy];
                        table[a * wy + b] = self.eval(&dz);
                    }
                }
                let mut out = vec![0.0; n];
                for i in 0..nx {
                    for j in 0..ny {
                        let mut acc = 0.0;
                        for k in 0..nx {
                            let base = (k + nx - 1 - i) * wy + ny - 1 - j;
                            let row = &table[base..base + ny];
                            acc += row.iter().zip(&values[k * ny..(k + 1) * ny]).map(|(w, r)| w * r).sum::<f64>();
                        }
                        out[i * ny + j] = acc * dv;
                    }
                }
                out
            }
        }
    }
}

/// Product Gaussian with per-axis means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: variance.len() });
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::param("variance", format!("must be positive, got {v}")));
        }
        Ok(Gaussian { mean, variance })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![variance; d])
    }

    /// Uniform log-concavity constant `1 / max variance`.
    pub fn log_concavity(&self) -> f64 {
        1.0 / self.variance.iter().cloned().fold(0.0, f64::max)
    }

    pub fn discretize(&self, grid: Arc<Grid>) -> Result<Density> {
        Density::gaussian(grid, &self.mean, &self.variance)
    }
}

/// Reference measure of the relative-entropy term, carried together with its
/// logarithm on the grid.
#[derive(Debug, Clone)]
pub struct Reference {
    density: Density,
    log_values: Vec<f64>,
    gaussian: Option<Gaussian>,
}

impl Reference {
    /// Gaussian reference. The logarithm is taken from the closed form, shifted
    /// so that `exp(log)` has unit mass on the grid.
    pub fn gaussian(grid: Arc<Grid>, g: Gaussian) -> Result<Self> {
        if g.mean.len() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), found: g.mean.len() });
        }
        let raw: Vec<f64> = grid.centers().map(|z| gaussian_log_kernel(z, &g.mean, &g.variance)).collect();
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + raw.iter().map(|l| (l - top).exp()).sum::<f64>().ln() + grid.cell_volume().ln();
        let log_values: Vec<f64> = raw.iter().map(|l| l - lse).collect();
        let density = Density::from_raw(grid, log_values.iter().map(|l| l.exp()).collect());
        Ok(Reference { density, log_values, gaussian: Some(g) })
    }

    /// Reference given only by its cell values.
    pub fn tabulated(density: Density) -> Self {
        let log_values = density.values().iter().map(|v| floored_ln(*v)).collect();
        Reference { density, log_values, gaussian: None }
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn gaussian_params(&self) -> Option<&Gaussian> {
        self.gaussian.as_ref()
    }

    /// `lambda~` such that `hess log rho~ <= -lambda~ Id`; known only for
    /// Gaussian references.
    pub fn log_concavity(&self) -> Option<f64> {
        self.gaussian.as_ref().map(Gaussian::log_concavity)
    }

    /// `sum rho log(rho / rho~) dV` using the stored logarithm.
    pub fn kl(&self, rho: &Density) -> f64 {
        let s: f64 = rho
            .values()
            .iter()
            .zip(&self.log_values)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, l)| r * (floored_ln(*r) - l))
            .sum();
        s * rho.grid().cell_volume()
    }

    /// `log(max(rho, eps)) - log rho~` cell by cell.
    pub fn log_ratio(&self, rho: &Density) -> Vec<f64> {
        rho.values().iter().zip(&self.log_values).map(|(r, l)| floored_ln(*r) - l).collect()
    }
}

/// Relative entropy between two cell densities. Returns `+inf` when `rho`
/// charges a cell where `reference` vanishes.
pub fn kl(rho: &Density, reference: &Density) -> Result<f64> {
    rho.same_grid(reference)?;
    let mut s = 0.0;
    for (r, q) in rho.values().iter().zip(reference.values()) {
        if *r <= 0.0 {
            continue;
        }
        if *q <= 0.0 {
            return Ok(f64::INFINITY);
        }
        s += r * (floored_ln(*r) - floored_ln(*q));
    }
    Ok(s * rho.grid().cell_volume())
}

/// Which energy a population follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Population and classifier minimize the same energy.
    Aligned,
    /// Population maximizes what the classifier minimizes.
    Competitive,
}

#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub cost: Cost,
    pub kernel: InteractionKernel,
    pub reference: Reference,
    pub static_population: Density,
    pub alpha: f64,
    pub beta: f64,
    pub anchor: Vec<f64>,
}

impl EnergyModel {
    pub fn new(
        cost: Cost,
        kernel: InteractionKernel,
        reference: Reference,
        static_population: Density,
        alpha: f64,
        beta: f64,
        anchor: Vec<f64>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::param("beta", format!("must be positive, got {beta}")));
        }
        reference.density().same_grid(&static_population)?;
        let dim = reference.density().grid().dim();
        if cost.space_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: cost.space_dim() });
        }
        if anchor.len() != cost.param_dim() || anchor.iter().any(|a| !a.is_finite()) {
            return Err(Error::param("anchor", format!("need {} finite components", cost.param_dim())));
        }
        Ok(EnergyModel { cost, kernel, reference, static_population, alpha, beta, anchor })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.reference.density().grid()
    }

    pub fn param_dim(&self) -> usize {
        self.cost.param_dim()
    }

    pub fn f1_field(&self, x: &[f64]) -> Vec<f64> {
        self.grid().centers().map(|z| self.cost.f1(z, x)).collect()
    }

    pub fn f2_field(&self, x: &[f64]) -> Vec<f64> {
        self.grid().centers().map(|z| self.cost.f2(z, x)).collect()
    }

    pub fn interaction(&self, rho: &Density) -> Vec<f64> {
        self.kernel.convolve(rho)
    }

    pub fn kl(&self, rho: &Density) -> f64 {
        self.reference.kl(rho)
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        0.5 * self.beta * x.iter().zip(&self.anchor).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    fn interaction_energy(&self, rho: &Density) -> f64 {
        if self.kernel.is_none() {
            0.0
        } else {
            0.5 * rho.dot(&self.interaction(rho))
        }
    }

    /// `int f1 drho + int f2 drho_bar + beta/2 |x - x0|^2`: what the classifier
    /// pays.
    pub fn classifier_loss(&self, rho: &Density, x: &[f64]) -> f64 {
        self.classifier_loss_with(rho, &self.static_population, x)
    }

    pub fn classifier_loss_with(&self, rho: &Density, other: &Density, x: &[f64]) -> f64 {
        rho.integrate(|z| self.cost.f1(z, x)) + other.integrate(|z| self.cost.f2(z, x)) + self.penalty(x)
    }

    /// `-int f1 drho + alpha KL + 1/2 int rho W*rho`: what the competitive
    /// population pays.
    pub fn population_loss(&self, rho: &Density, x: &[f64]) -> f64 {
        -rho.integrate(|z| self.cost.f1(z, x)) + self.alpha * self.kl(rho) + self.interaction_energy(rho)
    }

    pub fn energy_aligned(&self, rho: &Density, x: &[f64]) -> f64 {
        self.classifier_loss(rho, x) + self.alpha * self.kl(rho) + self.interaction_energy(rho)
    }

    pub fn energy_competitive(&self, rho: &Density, x: &[f64]) -> f64 {
        self.classifier_loss(rho, x) - self.alpha * self.kl(rho) - self.interaction_energy(rho)
    }

    pub fn energy(&self, objective: Objective, rho: &Density, x: &[f64]) -> f64 {
        match objective {
            Objective::Aligned => self.energy_aligned(rho, x),
            Objective::Competitive => self.energy_competitive(rho, x),
        }
    }

    /// First variation in `rho` of the aligned or competitive energy.
    ///
    /// Aligned: `f1 + alpha log(rho/rho~) + W*rho`.
    /// Competitive: `f1 - alpha log(rho/rho~) - W*rho`; a population
    /// maximizing this energy must be moved with the ascent sign.
    pub fn first_variation(&self, rho: &Density, x: &[f64], objective: Objective) -> Vec<f64> {
        let f1 = self.f1_field(x);
        self.variation_with(rho, f1, objective)
    }

    /// Shared tail of the first variation once the cost field is known.
    pub(crate) fn variation_with(&self, rho: &Density, mut field: Vec<f64>, objective: Objective) -> Vec<f64> {
        let sign = match objective {
            Objective::Aligned => 1.0,
            Objective::Competitive => -1.0,
        };
        let lr = self.reference.log_ratio(rho);
        for (f, l) in field.iter_mut().zip(&lr) {
            *f += sign * self.alpha * l;
        }
        if !self.kernel.is_none() {
            for (f, w) in field.iter_mut().zip(self.interaction(rho)) {
                *f += sign * w;
            }
        }
        field
    }

    /// `grad_x` of either energy (they share the `x` dependence).
    pub fn grad_x_energy(&self, rho: &Density, x: &[f64]) -> Vec<f64> {
        self.grad_x_with(rho, &self.static_population, x)
    }

    pub fn grad_x_with(&self, rho: &Density, other: &Density, x: &[f64]) -> Vec<f64> {
        let d = self.param_dim();
        let mut g = vec![0.0; d];
        let dv = rho.grid().cell_volume();
        for (z, r) in rho.grid().centers().zip(rho.values()) {
            self.cost.add_grad_x(false, z, x, r * dv, &mut g);
        }
        for (z, r) in other.grid().centers().zip(other.values()) {
            self.cost.add_grad_x(true, z, x, r * dv, &mut g);
        }
        for k in 0..d {
            g[k] += self.beta * (x[k] - self.anchor[k]);
        }
        g
    }

    /// `Q = beta Id + int hess_x f1 drho + int hess_x f2 drho_bar`, row-major.
    pub fn hess_x_energy(&self, rho: &Density, x: &[f64]) -> Vec<f64> {
        self.hess_x_with(rho, &self.static_population, x)
    }

    pub fn hess_x_with(&self, rho: &Density, other: &Density, x: &[f64]) -> Vec<f64> {
        let d = self.param_dim();
        let mut h = vec![0.0; d * d];
        let dv = rho.grid().cell_volume();
        for (z, r) in rho.grid().centers().zip(rho.values()) {
            self.cost.add_hess_x(false, z, x, r * dv, &mut h);
        }
        for (z, r) in other.grid().centers().zip(other.values()) {
            self.cost.add_hess_x(true, z, x, r * dv, &mut h);
        }
        for k in 0..d {
            h[k * d + k] += self.beta;
        }
        h
    }

    /// Right-hand side of the best-response bound
    /// `|x|^2 <= |x0|^2 + 2 (a1 + a2) / beta`.
    pub fn best_response_bound(&self) -> f64 {
        let (a1, a2) = self.cost.growth_bounds(self.grid());
        self.anchor.iter().map(|a| a * a).sum::<f64>() + 2.0 * (a1 + a2) / self.beta
    }

    /// Convexity modulus `alpha lambda~` of the entropy term, if known.
    pub fn entropy_modulus(&self) -> Option<f64> {
        self.reference.log_concavity().map(|l| self.alpha * l)
    }
}
