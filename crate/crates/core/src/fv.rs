//! Explicit upwind finite-volume transport `d_t rho = -div(rho u)` with face
//! velocities `u = -sign grad xi` and zero-flux walls.
//!
//! The update is written as
//! `rho_i' = rho_i (1 - dt out_i) + dt in_i`, where `out_i` collects the
//! outgoing face speeds of cell `i` and `in_i` the upwinded inflow. This is
//! algebraically the flux-difference form; it makes positivity visible (the
//! new value is non-negative whenever `dt out_i <= 1`).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Density, Grid};

/// Descent moves mass down `xi`, ascent moves it up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        }
    }
}

/// Velocities on cell faces, one array per axis.
///
/// Along an axis with `n` cells there are `n + 1` faces. The first and last are
/// walls and always carry zero velocity. On a plane grid the faces normal to
/// axis 0 are stored as `(nx + 1) x ny` and those normal to axis 1 as
/// `nx x (ny + 1)`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    grid: Arc<Grid>,
    per_axis: Vec<Vec<f64>>,
}

impl FaceVelocities {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let per_axis = match grid.dim() {
            1 => vec![vec![0.0; grid.len() + 1]],
            _ => {
                let (nx, ny) = (grid.axis(0).cells, grid.axis(1).cells);
                vec![vec![0.0; (nx + 1) * ny], vec![0.0; nx * (ny + 1)]]
            }
        };
        FaceVelocities { grid, per_axis }
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.per_axis[k]
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.per_axis.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.per_axis.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn max_speed_axis(&self, k: usize) -> f64 {
        self.per_axis[k].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest per-unit-time outflow rate `out_i` over cells.
    pub fn max_outflow_rate(&self) -> f64 {
        self.outflow_rates().into_iter().fold(0.0, f64::max)
    }

    fn outflow_rates(&self) -> Vec<f64> {
        let g = &self.grid;
        match g.dim() {
            1 => {
                let h = g.axis(0).width();
                let u = &self.per_axis[0];
                (0..g.len()).map(|i| (u[i + 1].max(0.0) - u[i].min(0.0)) / h).collect()
            }
            _ => {
                let (ax, ay) = (g.axis(0), g.axis(1));
                let (nx, ny) = (ax.cells, ay.cells);
                let (hx, hy) = (ax.width(), ay.width());
                let (u, v) = (&self.per_axis[0], &self.per_axis[1]);
                let mut out = vec![0.0; nx * ny];
                for i in 0..nx {
                    for j in 0..ny {
                        let ox = u[(i + 1) * ny + j].max(0.0) - u[i * ny + j].min(0.0);
                        let oy = v[i * (ny + 1) + j + 1].max(0.0) - v[i * (ny + 1) + j].min(0.0);
                        out[i * ny + j] = ox / hx + oy / hy;
                    }
                }
                out
            }
        }
    }
}

/// Upwind face velocities `u = -sign grad xi` from the cell field `xi`.
pub fn face_velocities(xi: &[f64], grid: &Arc<Grid>, direction: Direction) -> Result<FaceVelocities> {
    if xi.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: xi.len() });
    }
    if let Some(cell) = xi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteField { cell });
    }
    let s = -direction.sign();
    let mut fv = FaceVelocities::zeros(grid.clone());
    match grid.dim() {
        1 => {
            let h = grid.axis(0).width();
            let u = &mut fv.per_axis[0];
            for i in 0..xi.len() - 1 {
                u[i + 1] = s * (xi[i + 1] - xi[i]) / h;
            }
        }
        _ => {
            let (ax, ay) = (grid.axis(0), grid.axis(1));
            let (nx, ny) = (ax.cells, ay.cells);
            let (hx, hy) = (ax.width(), ay.width());
            {
                let u = &mut fv.per_axis[0];
                for i in 0..nx - 1 {
                    for j in 0..ny {
                        u[(i + 1) * ny + j] = s * (xi[(i + 1) * ny + j] - xi[i * ny + j]) / hx;
                    }
                }
            }
            let v = &mut fv.per_axis[1];
            for i in 0..nx {
                for j in 0..ny - 1 {
                    v[i * (ny + 1) + j + 1] = s * (xi[i * ny + j + 1] - xi[i * ny + j]) / hy;
                }
            }
        }
    }
    Ok(fv)
}

/// Largest step allowed by the CFL number: `cfl dz / max|u|` on a line,
/// `cfl min(dx, dy) / (max|u| + max|v|)` on a plane. `+inf` when nothing
/// moves.
pub fn cfl_dt(u: &FaceVelocities, cfl: f64) -> Result<f64> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::param("cfl", format!("must lie in (0, 1], got {cfl}")));
    }
    let g = u.grid();
    let h = g.widths().into_iter().fold(f64::INFINITY, f64::min);
    let speed: f64 = (0..g.dim()).map(|k| u.max_speed_axis(k)).sum();
    Ok(if speed > 0.0 { cfl * h / speed } else { f64::INFINITY })
}

/// Largest step keeping every cell non-negative: `1 / max_i out_i`.
pub fn positivity_dt(u: &FaceVelocities) -> f64 {
    let r = u.max_outflow_rate();
    if r > 0.0 {
        1.0 / r
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub dt: f64,
    pub max_speed: f64,
    pub min_value: f64,
    /// Mass after the step minus mass before.
    pub mass_drift: f64,
}

/// One explicit Euler step of the upwind scheme.
///
/// Rejects `dt` beyond the positivity limit. The result is not renormalized;
/// the report carries the mass drift instead.
pub fn step(rho: &Density, u: &FaceVelocities, dt: f64) -> Result<(Density, StepReport)> {
    let grid = rho.grid();
    if **u.grid() != **grid {
        return Err(Error::GridMismatch);
    }
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be finite and non-negative, got {dt}")));
    }
    let admissible = positivity_dt(u);
    if dt > admissible {
        return Err(Error::CflViolation { dt, admissible });
    }
    let r = rho.values();
    let mut next = r.to_vec();
    match grid.dim() {
        1 => {
            let h = grid.axis(0).width();
            let v = &u.per_axis[0];
            let k = dt / h;
            for i in 0..r.len() {
                let (left, right) = (v[i], v[i + 1]);
                if left == 0.0 && right == 0.0 {
                    continue;
                }
                let out = right.max(0.0) - left.min(0.0);
                let mut inflow = 0.0;
                if left > 0.0 {
                    inflow += left * r[i - 1];
                }
                if right < 0.0 {
                    inflow -= right * r[i + 1];
                }
                next[i] = r[i] * (1.0 - k * out) + k * inflow;
            }
        }
        _ => {
            let (ax, ay) = (grid.axis(0), grid.axis(1));
            let (nx, ny) = (ax.cells, ay.cells);
            let (kx, ky) = (dt / ax.width(), dt / ay.width());
            let (fu, fv) = (&u.per_axis[0], &u.per_axis[1]);
            for i in 0..nx {
                for j in 0..ny {
                    let c = i * ny + j;
                    let (w, e) = (fu[i * ny + j], fu[(i + 1) * ny + j]);
                    let (s, n) = (fv[i * (ny + 1) + j], fv[i * (ny + 1) + j + 1]);
                    if w == 0.0 && e == 0.0 && s == 0.0 && n == 0.0 {
                        continue;
                    }
                    let out = kx * (e.max(0.0) - w.min(0.0)) + ky * (n.max(0.0) - s.min(0.0));
                    let mut inflow = 0.0;
                    if w > 0.0 {
                        inflow += kx * w * r[c - ny];
                    }
                    if e < 0.0 {
                        inflow -= kx * e * r[c + ny];
                    }
                    if s > 0.0 {
                        inflow += ky * s * r[c - 1];
                    }
                    if n < 0.0 {
                        inflow -= ky * n * r[c + 1];
                    }
                    next[c] = r[c] * (1.0 - out) + inflow;
                }
            }
        }
    }
    // an outflow factor that rounds to a hair below zero
    for v in next.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let out = Density::from_raw(grid.clone(), next);
    let report = StepReport {
        dt,
        max_speed: u.max_speed(),
        min_value: out.min_value(),
        mass_drift: out.mass() - rho.mass(),
    };
    Ok((out, report))
}

/// Unsplit two-dimensional step driven directly by the field `xi`.
pub fn step2d(rho: &Density, xi: &[f64], direction: Direction, dt: f64) -> Result<(Density, StepReport)> {
    if rho.grid().dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: rho.grid().dim() });
    }
    let u = face_velocities(xi, rho.grid(), direction)?;
    step(rho, &u, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use approx::assert_abs_diff_eq;

    fn line(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
        Arc::new(Grid::line(lo, hi, n).unwrap())
    }

    #[test]
    fn constant_field_has_zero_velocity() {
        let g = line(0.0, 1.0, 10);
        let u = face_velocities(&[2.5; 10], &g, Direction::Descent).unwrap();
        assert_eq!(u.max_speed(), 0.0);
        assert_eq!(cfl_dt(&u, 0.5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn linear_field_gives_unit_velocity() {
        let g = line(-1.0, 1.0, 20);
        let xi: Vec<f64> = g.centers().map(|z| z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        let a = u.axis(0);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[20], 0.0);
        for v in &a[1..20] {
            assert_abs_diff_eq!(*v, -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_field_velocity_is_minus_face_position() {
        let g = line(-2.0, 3.0, 50);
        let xi: Vec<f64> = g.centers().map(|z| 0.5 * z[0] * z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        for i in 0..49 {
            assert_abs_diff_eq!(u.axis(0)[i + 1], -g.axis(0).face(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn nan_field_rejected() {
        let g = line(0.0, 1.0, 4);
        let err = face_velocities(&[0.0, f64::NAN, 0.0, 0.0], &g, Direction::Ascent).unwrap_err();
        assert!(matches!(err, Error::NonFiniteField { cell: 1 }));
    }

    #[test]
    fn cfl_formula() {
        let g = line(0.0, 1.0, 10);
        let xi: Vec<f64> = g.centers().map(|z| -2.0 * z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        assert_abs_diff_eq!(cfl_dt(&u, 0.5).unwrap(), 0.025, epsilon = 1e-14);
        assert!(cfl_dt(&u, 0.0).is_err());
    }

    #[test]
    fn zero_velocity_step_is_identity() {
        let g = line(-3.0, 3.0, 30);
        let rho = Density::gaussian(g.clone(), &[0.2], &[0.5]).unwrap();
        let (next, rep) = step(&rho, &FaceVelocities::zeros(g), 0.1).unwrap();
        assert_eq!(next, rho);
        assert_eq!(rep.mass_drift, 0.0);
    }

    #[test]
    fn step_beyond_limit_rejected() {
        let g = line(0.0, 1.0, 10);
        let xi: Vec<f64> = g.centers().map(|z| -z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        let rho = Density::discretize(g, |_| 1.0).unwrap();
        match step(&rho, &u, 1.0) {
            Err(Error::CflViolation { admissible, .. }) => assert_abs_diff_eq!(admissible, 0.1, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_advection_moves_mean() {
        let g = line(-5.0, 5.0, 200);
        let rho = Density::gaussian(g.clone(), &[0.0], &[0.25]).unwrap();
        let xi: Vec<f64> = g.centers().map(|z| -z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        let dt = cfl_dt(&u, 1.0).unwrap() / 2.0;
        let (next, rep) = step(&rho, &u, dt).unwrap();
        let moved = next.mean()[0] - rho.mean()[0];
        assert!((moved - dt).abs() <= 0.05 * dt, "{moved} vs {dt}");
        assert!(rep.mass_drift.abs() <= 1e-12);
    }

    #[test]
    fn ascent_reverses_descent() {
        let g = line(-1.0, 1.0, 8);
        let xi: Vec<f64> = g.centers().map(|z| z[0] * z[0]).collect();
        let a = face_velocities(&xi, &g, Direction::Descent).unwrap();
        let b = face_velocities(&xi, &g, Direction::Ascent).unwrap();
        for (x, y) in a.axis(0).iter().zip(b.axis(0)) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn plane_step_conserves_mass() {
        let g = Arc::new(Grid::plane(Axis::new(-2.0, 2.0, 20).unwrap(), Axis::new(-2.0, 2.0, 16).unwrap()).unwrap());
        let rho = Density::gaussian(g.clone(), &[0.3, -0.2], &[0.4, 0.6]).unwrap();
        let xi: Vec<f64> = g.centers().map(|z| (z[0] * 1.3).sin() + z[1] * z[0]).collect();
        let u = face_velocities(&xi, &g, Direction::Descent).unwrap();
        let dt = cfl_dt(&u, 0.9).unwrap();
        let (next, rep) = step2d(&rho, &xi, Direction::Descent, dt).unwrap();
        assert!(rep.mass_drift.abs() <= 1e-12);
        assert!(next.min_value() >= 0.0);
    }

    #[test]
    fn plane_step_without_gradient_is_identity() {
        let g = Arc::new(Grid::plane(Axis::new(-2.0, 2.0, 8).unwrap(), Axis::new(-2.0, 2.0, 8).unwrap()).unwrap());
        let rho = Density::gaussian(g.clone(), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let (next, _) = step2d(&rho, &vec![1.0; 64], Direction::Ascent, 0.3).unwrap();
        assert_eq!(next, rho);
    }
}
