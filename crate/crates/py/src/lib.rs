//! Python bindings for the `driftflow` simulator.
//!
//! Exposes grids, densities, energy models, scenario configs and trajectories,
//! the best-response and equilibrium solvers, the main diagnostics and the
//! three CLI commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use driftflow::cli::{self, RunFlags, EXIT_CONFIG, EXIT_IO};
use driftflow::config::{load_config, write_config, ScenarioConfig};
use driftflow::diagnostics;
use driftflow::dynamics::{self, FixedPointSettings, Trajectory as CoreTrajectory};
use driftflow::{Density as CoreDensity, EnergyModel, Error, Grid as CoreGrid, Objective};
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    match cli::exit_code(&err) {
        EXIT_CONFIG => PyValueError::new_err(err.to_string()),
        EXIT_IO => PyOSError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn objective(name: &str) -> PyResult<Objective> {
    match name {
        "aligned" => Ok(Objective::Aligned),
        "competitive" => Ok(Objective::Competitive),
        other => Err(PyValueError::new_err(format!("objective must be 'aligned' or 'competitive', got '{other}'"))),
    }
}

/// Cell grid on a line or a rectangle.
#[pyclass(module = "pydriftflow", frozen)]
struct Grid(Arc<CoreGrid>);

#[pymethods]
impl Grid {
    #[staticmethod]
    fn line(lower: f64, upper: f64, cells: usize) -> PyResult<Self> {
        Ok(Grid(Arc::new(CoreGrid::line(lower, upper, cells).map_err(to_py)?)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape()
    }

    #[getter]
    fn cell_volume(&self) -> f64 {
        self.0.cell_volume()
    }

    /// Cell centers, one list of coordinates per cell.
    fn centers(&self) -> Vec<Vec<f64>> {
        self.0.centers().map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Grid(shape={:?})", self.0.shape())
    }
}

/// Cell-averaged probability density.
#[pyclass(module = "pydriftflow", frozen)]
struct Density(CoreDensity);

#[pymethods]
impl Density {
    #[staticmethod]
    fn gaussian(grid: &Grid, mean: Vec<f64>, variance: Vec<f64>) -> PyResult<Self> {
        Ok(Density(CoreDensity::gaussian(grid.0.clone(), &mean, &variance).map_err(to_py)?))
    }

    #[staticmethod]
    fn from_values(grid: &Grid, values: Vec<f64>) -> PyResult<Self> {
        Ok(Density(CoreDensity::from_values(grid.0.clone(), values).map_err(to_py)?))
    }

    #[getter]
    fn grid(&self) -> Grid {
        Grid(self.0.grid().clone())
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.0.mass()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean()
    }

    #[getter]
    fn variance(&self) -> Vec<f64> {
        self.0.variance()
    }

    #[getter]
    fn min_value(&self) -> f64 {
        self.0.min_value()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Density(cells={}, mass={:.6})", self.0.len(), self.0.mass())
    }
}

/// Costs, kernel, reference measure and penalty of a scenario.
#[pyclass(module = "pydriftflow", frozen)]
struct Model(EnergyModel);

#[pymethods]
impl Model {
    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn grid(&self) -> Grid {
        Grid(self.0.grid().clone())
    }

    #[getter]
    fn static_population(&self) -> Density {
        Density(self.0.static_population.clone())
    }

    #[getter]
    fn reference(&self) -> Density {
        Density(self.0.reference.density().clone())
    }

    #[pyo3(signature = (rho, x, objective = "competitive"))]
    fn energy(&self, rho: &Density, x: Vec<f64>, objective: &str) -> PyResult<f64> {
        Ok(self.0.energy(self::objective(objective)?, &rho.0, &x))
    }

    fn grad_x(&self, rho: &Density, x: Vec<f64>) -> Vec<f64> {
        self.0.grad_x_energy(&rho.0, &x)
    }

    fn classifier_loss(&self, rho: &Density, x: Vec<f64>) -> f64 {
        self.0.classifier_loss(&rho.0, &x)
    }

    fn population_loss(&self, rho: &Density, x: Vec<f64>) -> f64 {
        self.0.population_loss(&rho.0, &x)
    }

    /// Relative entropy of `rho` with respect to the reference measure.
    fn kl(&self, rho: &Density) -> f64 {
        self.0.kl(&rho.0)
    }
}

/// Sampled states of a run.
#[pyclass(module = "pydriftflow", frozen)]
struct Trajectory(CoreTrajectory);

#[pymethods]
impl Trajectory {
    #[getter]
    fn regime(&self) -> &'static str {
        self.0.regime.name()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    #[getter]
    fn energies(&self) -> Vec<f64> {
        self.0.energies()
    }

    /// Classifier parameter at every sample.
    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.0.samples.iter().map(|s| s.state.x().to_vec()).collect()
    }

    #[getter]
    fn classifier_loss(&self) -> Vec<f64> {
        self.0.samples.iter().map(|s| s.classifier_loss).collect()
    }

    #[getter]
    fn population_loss(&self) -> Vec<f64> {
        self.0.samples.iter().map(|s| s.population_loss).collect()
    }

    #[getter]
    fn max_step_drift(&self) -> f64 {
        self.0.conservation.max_step_drift
    }

    #[getter]
    fn cumulative_drift(&self) -> f64 {
        self.0.conservation.cumulative_drift
    }

    /// Population density at sample `k`; negative `k` counts from the end.
    fn density(&self, k: isize) -> PyResult<Density> {
        let n = self.0.samples.len() as isize;
        let i = if k < 0 { n + k } else { k };
        if !(0..n).contains(&i) {
            return Err(PyIndexError::new_err(format!("sample {k} out of range for {n} samples")));
        }
        Ok(Density(self.0.samples[i as usize].state.rho.clone()))
    }

    fn __len__(&self) -> usize {
        self.0.samples.len()
    }
}

/// Scenario loaded from a config file.
#[pyclass(module = "pydriftflow", frozen)]
struct Config(ScenarioConfig);

#[pymethods]
impl Config {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config(load_config(&path).map_err(to_py)?))
    }

    /// Parses config text; relative file paths resolve against `base`.
    #[staticmethod]
    #[pyo3(signature = (text, base = PathBuf::from(".")))]
    fn parse(text: &str, base: PathBuf) -> PyResult<Self> {
        ScenarioConfig::parse(text, &base).map(Config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn regime(&self) -> &'static str {
        self.0.regime.name()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output_dir.clone()
    }

    fn to_text(&self) -> String {
        write_config(&self.0)
    }

    fn model(&self) -> PyResult<Model> {
        Ok(Model(self.0.model().map_err(to_py)?))
    }

    fn initial_density(&self) -> PyResult<Density> {
        Ok(Density(self.0.build().map_err(to_py)?.initial.rho))
    }

    /// Runs the scenario in memory without writing files.
    fn simulate(&self, py: Python<'_>) -> PyResult<Trajectory> {
        let (_, traj) = py.detach(|| cli::simulate(&self.0)).map_err(to_py)?;
        Ok(Trajectory(traj))
    }
}

#[pyfunction]
fn wasserstein2(a: &Density, b: &Density) -> PyResult<f64> {
    diagnostics::wasserstein2_1d(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (rho, prominence = 0.2))]
fn count_modes(rho: &Density, prominence: f64) -> usize {
    diagnostics::count_modes(&rho.0, prominence)
}

/// Relative entropy `KL(rho | reference)`.
#[pyfunction]
fn kl(rho: &Density, reference: &Density) -> PyResult<f64> {
    driftflow::model::kl(&rho.0, &reference.0).map_err(to_py)
}

/// Decay rate `lambda` of `values ~ exp(-2 lambda t)` over the trailing
/// `window` fraction of the samples.
#[pyfunction]
#[pyo3(signature = (times, values, window = 0.5))]
fn fit_decay_rate(times: Vec<f64>, values: Vec<f64>, window: f64) -> PyResult<f64> {
    diagnostics::fit_decay_rate(&times, &values, window).map_err(to_py)
}

/// Classifier best response to a fixed population.
#[pyfunction]
#[pyo3(signature = (rho, model, tol = 1e-12))]
fn best_response_x(rho: &Density, model: &Model, tol: f64) -> PyResult<Vec<f64>> {
    dynamics::best_response_x(&rho.0, &model.0, tol, None).map_err(to_py)
}

/// Population best response to a fixed classifier.
#[pyfunction]
#[pyo3(signature = (x, model, objective = "competitive", tol = 1e-9))]
fn best_response_rho(x: Vec<f64>, model: &Model, objective: &str, tol: f64) -> PyResult<Density> {
    let settings = FixedPointSettings { tol, ..Default::default() };
    dynamics::population_response(&x, &model.0, self::objective(objective)?, settings, None)
        .map(Density)
        .map_err(to_py)
}

/// Joint stationary point `(rho*, x*)` found from the classifier guess `start`.
#[pyfunction]
#[pyo3(signature = (model, start, objective = "competitive"))]
fn equilibrium(model: &Model, start: Vec<f64>, objective: &str) -> PyResult<(Density, Vec<f64>)> {
    let (rho, x) = dynamics::equilibrium(&model.0, self::objective(objective)?, &start).map_err(to_py)?;
    Ok((Density(rho), x))
}

/// `driftflow run`: simulates a config file and writes its artifacts.
/// Returns the output directory and the trajectory.
#[pyfunction]
#[pyo3(signature = (path, out = None, stride = None))]
fn run(py: Python<'_>, path: PathBuf, out: Option<PathBuf>, stride: Option<usize>) -> PyResult<(PathBuf, Trajectory)> {
    let outcome = py.detach(|| cli::cmd_run(&path, &RunFlags { out, stride })).map_err(to_py)?;
    Ok((outcome.out_dir, Trajectory(outcome.trajectory)))
}

/// `driftflow check`: returns whether every applicable check passed and the
/// verdict text.
#[pyfunction]
#[pyo3(signature = (path, out = None))]
fn check(py: Python<'_>, path: PathBuf, out: Option<PathBuf>) -> PyResult<(bool, String)> {
    let outcome = py.detach(|| cli::cmd_check(&path, out.as_deref())).map_err(to_py)?;
    Ok((outcome.passed(), outcome.verdicts()))
}

/// `driftflow compare`: returns the comparison table as text.
#[pyfunction]
#[pyo3(signature = (a, b, out = None))]
fn compare(py: Python<'_>, a: PathBuf, b: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let cmp = py.detach(|| cli::cmd_compare(Path::new(&a), Path::new(&b), out.as_deref())).map_err(to_py)?;
    Ok(cmp.table())
}

#[pymodule]
fn pydriftflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Density>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(wasserstein2, m)?)?;
    m.add_function(wrap_pyfunction!(count_modes, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(fit_decay_rate, m)?)?;
    m.add_function(wrap_pyfunction!(best_response_x, m)?)?;
    m.add_function(wrap_pyfunction!(best_response_rho, m)?)?;
    m.add_function(wrap_pyfunction!(equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
