//! Uniform cell grids on a truncated box and cell-averaged probability
//! densities living on them.
//!
//! A [`Grid`] is either a line or a plane. Cells are stored row-major, so the
//! cell `(i, j)` of a plane grid has flat index `i * ny + j`, with `i` running
//! along the first axis.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Minimum number of cells per axis.
pub const MIN_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::InvalidGrid(format!("bounds must be finite, got [{lower}, {upper}]")));
        }
        if upper <= lower {
            return Err(Error::InvalidGrid(format!("upper bound {upper} must exceed lower bound {lower}")));
        }
        if cells < MIN_CELLS {
            return Err(Error::InvalidGrid(format!("need at least {MIN_CELLS} cells per axis, got {cells}")));
        }
        Ok(Axis { lower, upper, cells })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.cells as f64
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.width()
    }

    /// Position of the face between cell `i` and cell `i + 1`.
    #[inline]
    pub fn face(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 1.0) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    axes: Vec<Axis>,
    centers: Vec<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.axes == other.axes
    }
}

impl Grid {
    pub fn line(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::from_axes(vec![Axis::new(lower, upper, cells)?])
    }

    pub fn plane(first: Axis, second: Axis) -> Result<Self> {
        Self::from_axes(vec![first, second])
    }

    pub fn from_axes(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {}", axes.len())));
        }
        for a in &axes {
            Axis::new(a.lower, a.upper, a.cells)?;
        }
        let centers = match axes.as_slice() {
            [a] => a.centers(),
            [a, b] => {
                let mut c = Vec::with_capacity(2 * a.cells * b.cells);
                for i in 0..a.cells {
                    for j in 0..b.cells {
                        c.push(a.center(i));
                        c.push(b.center(j));
                    }
                }
                c
            }
            _ => unreachable!(),
        };
        Ok(Grid { axes, centers })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    /// Total number of cells.
    #[inline]
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.cells).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.cells).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::width).collect()
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    /// Coordinates of the center of cell `k`.
    #[inline]
    pub fn center(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.centers[k * d..(k + 1) * d]
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.centers.chunks_exact(self.dim())
    }

    /// Flat index of cell `(i, j)` on a plane grid.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.axes[1].cells + j
    }

    /// Index of the cell containing `point`, if any.
    pub fn locate(&self, point: &[f64]) -> Option<usize> {
        if point.len() != self.dim() {
            return None;
        }
        let mut flat = 0;
        for (a, &p) in self.axes.iter().zip(point) {
            if !(p >= a.lower && p <= a.upper) {
                return None;
            }
            let i = (((p - a.lower) / a.width()) as usize).min(a.cells - 1);
            flat = flat * a.cells + i;
        }
        Some(flat)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, a) in self.axes.iter().enumerate() {
            if k > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{}, {}] / {}", a.lower, a.upper, a.cells)?;
        }
        Ok(())
    }
}

/// Cell-averaged probability density on a [`Grid`].
#[derive(Debug, Clone)]
pub struct Density {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl PartialEq for Density {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl Density {
    /// Validates `values` and rescales them to unit mass.
    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDensity(format!("cell {k} holds {}", values[k])));
        }
        let mut d = Density { grid, values };
        d.normalize()?;
        Ok(d)
    }

    /// Midpoint discretization of `pdf`, renormalized to unit mass.
    pub fn discretize(grid: Arc<Grid>, pdf: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.centers().map(&pdf).collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDensity(format!("pdf evaluates to {} at cell {k}", values[k])));
        }
        Self::from_values(grid, values)
    }

    /// Discretized product Gaussian with per-axis means and variances.
    ///
    /// Evaluated in the log domain so narrow Gaussians far from the box do not
    /// underflow to an all-zero field.
    pub fn gaussian(grid: Arc<Grid>, mean: &[f64], variance: &[f64]) -> Result<Self> {
        let d = grid.dim();
        if mean.len() != d || variance.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: mean.len().min(variance.len()) });
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::param("variance", format!("must be positive, got {v}")));
        }
        let logs: Vec<f64> = grid.centers().map(|z| gaussian_log_kernel(z, mean, variance)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::from_values(grid, logs.iter().map(|l| (l - top).exp()).collect())
    }

    /// Wraps values without validation or renormalization. Used by the
    /// solvers, which must report mass drift rather than hide it.
    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Density { grid, values }
    }

    fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(Error::EmptyDensity);
        }
        let scale = 1.0 / mass;
        self.values.iter_mut().for_each(|v| *v *= scale);
        Ok(())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-axis raw moments `sum z^k rho dV`.
    pub fn moment(&self, k: u32) -> Vec<f64> {
        let dv = self.grid.cell_volume();
        (0..self.grid.dim())
            .map(|a| {
                self.grid
                    .centers()
                    .zip(&self.values)
                    .map(|(z, r)| z[a].powi(k as i32) * r)
                    .sum::<f64>()
                    * dv
            })
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.moment(1)
    }

    /// Per-axis central second moments.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let dv = self.grid.cell_volume();
        (0..self.grid.dim())
            .map(|a| {
                self.grid
                    .centers()
                    .zip(&self.values)
                    .map(|(z, r)| (z[a] - m[a]).powi(2) * r)
                    .sum::<f64>()
                    * dv
            })
            .collect()
    }

    /// Integral of `f` against this density.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.grid.centers().zip(&self.values).map(|(z, r)| f(z) * r).sum::<f64>() * self.grid.cell_volume()
    }

    /// `sum field_i rho_i dV`.
    pub fn dot(&self, field: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.values.len());
        self.values.iter().zip(field).map(|(r, f)| r * f).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn same_grid(&self, other: &Density) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Cumulative cell masses, ending at (approximately) one.
    pub fn cell_cdf(&self) -> Vec<f64> {
        let dv = self.grid.cell_volume();
        let mut acc = 0.0;
        self.values
            .iter()
            .map(|r| {
                acc += r * dv;
                acc
            })
            .collect()
    }

    /// Draws `count` points by inverse-CDF sampling of the piecewise-constant
    /// density. Deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cdf = self.cell_cdf();
        let total = *cdf.last().unwrap_or(&1.0);
        let dv = self.grid.cell_volume();
        let dim = self.grid.dim();
        let mut coords = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let u = rng.random::<f64>() * total;
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            // skip zero-mass cells that tie with their predecessor
            let k = (k..cdf.len()).find(|&i| self.values[i] > 0.0).unwrap_or(k);
            let before = if k == 0 { 0.0 } else { cdf[k - 1] };
            let cell_mass = self.values[k] * dv;
            match dim {
                1 => {
                    let a = self.grid.axis(0);
                    let frac = if cell_mass > 0.0 { ((u - before) / cell_mass).clamp(0.0, 1.0) } else { 0.5 };
                    coords.push(a.lower + (k as f64 + frac) * a.width());
                }
                _ => {
                    let (a, b) = (self.grid.axis(0), self.grid.axis(1));
                    let (i, j) = (k / b.cells, k % b.cells);
                    coords.push(a.lower + (i as f64 + rng.random::<f64>()) * a.width());
                    coords.push(b.lower + (j as f64 + rng.random::<f64>()) * b.width());
                }
            }
        }
        PointCloud { dim, coords }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self.grid.dim() {
            1 => w.write_record(["z", "rho"])?,
            _ => w.write_record(["z1", "z2", "rho"])?,
        }
        for (z, r) in self.grid.centers().zip(&self.values) {
            let mut row: Vec<String> = z.iter().map(|c| format!("{c:.12e}")).collect();
            row.push(format!("{r:.17e}"));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a density written by [`Density::write_csv`] onto `grid`. Cell
    /// centers in the file must coincide with the grid's.
    pub fn read_csv<R: Read>(grid: Arc<Grid>, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let dim = grid.dim();
        let expected: &[&str] = if dim == 1 { &["z", "rho"] } else { &["z1", "z2", "rho"] };
        let headers = r.headers()?.clone();
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(Error::InvalidDensity(format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let tol: f64 = grid.widths().iter().cloned().fold(f64::INFINITY, f64::min) * 1e-6;
        let mut values = Vec::with_capacity(grid.len());
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            if k >= grid.len() {
                return Err(Error::DimensionMismatch { expected: grid.len(), found: k + 1 });
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| Error::InvalidDensity(format!("row {}: cannot parse `{s}`", k + 1)))
            };
            let center = grid.center(k);
            for a in 0..dim {
                let z = parse(&rec[a])?;
                if (z - center[a]).abs() > tol {
                    return Err(Error::GridMismatch);
                }
            }
            values.push(parse(&rec[dim])?);
        }
        Self::from_values(grid, values)
    }

    pub fn load_csv(grid: Arc<Grid>, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(grid, std::io::BufReader::new(file))
    }
}

/// Unnormalized log of a product Gaussian.
pub(crate) fn gaussian_log_kernel(z: &[f64], mean: &[f64], variance: &[f64]) -> f64 {
    z.iter().zip(mean).zip(variance).map(|((z, m), v)| -(z - m).powi(2) / (2.0 * v)).sum()
}

/// Points in `dim` dimensions stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}
