//! Scenario files.
//!
//! A scenario is a flat list of `section.key = value` lines. Blank lines and
//! text after `#` are ignored. Lists are comma separated. Populations are
//! given either as a Gaussian (`mean`, `variance`) or as a density CSV
//! (`file`, relative to the scenario file).
//!
//! ```text
//! scenario.name = competitive_1d
//! scenario.regime = competitive
//! grid.lower = -4
//! grid.upper = 6
//! grid.cells = 200
//! model.alpha = 0.1
//! model.beta = 0.05
//! model.cost = logistic
//! model.slope = 3
//! model.anchor = 1.5
//! reference.mean = -0.5
//! reference.variance = 0.07
//! static.mean = 1
//! static.variance = 0.25
//! initial.mean = 0
//! initial.variance = 0.25
//! time.final = 60
//! time.dt = 0.01
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::dynamics::{initial_state, Regime, Scenario, TimeSettings};
use crate::error::{Error, Result};
use crate::grid::{Axis, Density, Grid};
use crate::model::{Cost, EnergyModel, Gaussian, InteractionKernel, Reference};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing key `{key}` (expected {expected})")]
    Missing { key: String, expected: &'static str },

    #[error("key `{key}`: expected {expected}, found `{found}`")]
    Type { key: String, expected: &'static str, found: String },

    #[error("key `{key}` out of range: {reason}")]
    Range { key: String, reason: String },

    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },

    #[error("cannot use {path}: {reason}")]
    File { path: PathBuf, reason: String },
}

const KEYS: &[&str] = &[
    "scenario.name",
    "scenario.regime",
    "scenario.timescale_ratio",
    "scenario.fixed_x",
    "scenario.samples",
    "scenario.best_response",
    "scenario.seed",
    "grid.lower",
    "grid.upper",
    "grid.cells",
    "model.alpha",
    "model.beta",
    "model.cost",
    "model.slope",
    "model.anchor",
    "model.initial_x",
    "model.kernel",
    "model.kernel_scale",
    "reference.mean",
    "reference.variance",
    "reference.file",
    "static.mean",
    "static.variance",
    "static.file",
    "initial.mean",
    "initial.variance",
    "initial.file",
    "tau_reference.mean",
    "tau_reference.variance",
    "tau_reference.file",
    "tau_initial.mean",
    "tau_initial.variance",
    "tau_initial.file",
    "time.final",
    "time.dt",
    "time.cfl",
    "time.sample_stride",
    "time.snapshot_stride",
    "output.dir",
];

#[derive(Debug, Clone, PartialEq)]
pub enum PopulationSpec {
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostSpec {
    Logistic,
    Logistic2d,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    None,
    Quadratic(f64),
    Consensus(f64),
}

/// Validated contents of a scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub regime: Regime,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub cost: CostSpec,
    pub slope: f64,
    pub anchor: Vec<f64>,
    pub initial_x: Vec<f64>,
    pub kernel: KernelSpec,
    pub reference: PopulationSpec,
    pub static_population: PopulationSpec,
    pub initial: PopulationSpec,
    pub tau_reference: Option<PopulationSpec>,
    pub tau_initial: Option<PopulationSpec>,
    pub final_time: f64,
    pub dt: f64,
    pub cfl: f64,
    pub sample_stride: usize,
    pub snapshot_stride: usize,
    pub output_dir: PathBuf,
}

struct Entry {
    value: String,
    line: usize,
}

struct Table {
    entries: BTreeMap<String, Entry>,
    base: PathBuf,
}

type CResult<T> = std::result::Result<T, ConfigError>;

fn parse_number<T: std::str::FromStr>(key: &str, raw: &str, expected: &'static str) -> CResult<T> {
    raw.trim().parse::<T>().map_err(|_| ConfigError::Type { key: key.into(), expected, found: raw.into() })
}

impl Table {
    fn parse(text: &str, base: PathBuf) -> CResult<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, reason: format!("expected `key = value`, found `{content}`") })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { key: key.into(), line });
            }
            let value = value.trim();
            if value.is_empty() {
                return Err(ConfigError::Syntax { line, reason: format!("empty value for `{key}`") });
            }
            if entries.insert(key.to_string(), Entry { value: value.to_string(), line }).is_some() {
                return Err(ConfigError::Syntax { line, reason: format!("duplicate key `{key}`") });
            }
        }
        Ok(Table { entries, base })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn string(&self, key: &str) -> CResult<String> {
        self.raw(key).map(str::to_string).ok_or(ConfigError::Missing { key: key.into(), expected: "a string" })
    }

    fn float(&self, key: &str) -> CResult<f64> {
        let raw = self.raw(key).ok_or(ConfigError::Missing { key: key.into(), expected: "a number" })?;
        let v: f64 = parse_number(key, raw, "a number")?;
        if !v.is_finite() {
            return Err(ConfigError::Range { key: key.into(), reason: "must be finite".into() });
        }
        Ok(v)
    }

    fn float_or(&self, key: &str, default: f64) -> CResult<f64> {
        if self.has(key) {
            self.float(key)
        } else {
            Ok(default)
        }
    }

    fn positive(&self, key: &str) -> CResult<f64> {
        let v = self.float(key)?;
        if v <= 0.0 {
            return Err(ConfigError::Range { key: key.into(), reason: format!("must be positive, got {v}") });
        }
        Ok(v)
    }

    fn integer(&self, key: &str) -> CResult<u64> {
        let raw = self.raw(key).ok_or(ConfigError::Missing { key: key.into(), expected: "a non-negative integer" })?;
        parse_number(key, raw, "a non-negative integer")
    }

    fn floats(&self, key: &str) -> CResult<Vec<f64>> {
        let raw = self.raw(key).ok_or(ConfigError::Missing { key: key.into(), expected: "a list of numbers" })?;
        raw.split(',')
            .map(|p| {
                let v: f64 = parse_number(key, p, "a list of numbers")?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ConfigError::Range { key: key.into(), reason: "must be finite".into() })
                }
            })
            .collect()
    }

    fn integers(&self, key: &str) -> CResult<Vec<usize>> {
        let raw = self.raw(key).ok_or(ConfigError::Missing { key: key.into(), expected: "a list of integers" })?;
        raw.split(',').map(|p| parse_number(key, p, "a list of integers")).collect()
    }

    fn boolean(&self, key: &str) -> CResult<bool> {
        match self.raw(key) {
            None => Ok(false),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(ConfigError::Type { key: key.into(), expected: "true or false", found: other.into() }),
        }
    }

    fn population(&self, section: &str, dim: usize) -> CResult<Option<PopulationSpec>> {
        let (mk, vk, fk) = (format!("{section}.mean"), format!("{section}.variance"), format!("{section}.file"));
        match (self.has(&mk) || self.has(&vk), self.has(&fk)) {
            (false, false) => Ok(None),
            (true, true) => Err(ConfigError::Range {
                key: fk,
                reason: format!("give either `{section}.mean`/`{section}.variance` or `{section}.file`, not both"),
            }),
            (false, true) => {
                let raw = self.raw(&fk).unwrap();
                let path = self.base.join(raw);
                if !path.is_file() {
                    return Err(ConfigError::File { path, reason: "file does not exist".into() });
                }
                Ok(Some(PopulationSpec::File(path)))
            }
            (true, false) => {
                let mean = self.floats(&mk)?;
                let variance = self.floats(&vk)?;
                for (key, v) in [(&mk, &mean), (&vk, &variance)] {
                    if v.len() != dim {
                        return Err(ConfigError::Range {
                            key: key.clone(),
                            reason: format!("need {dim} component(s), got {}", v.len()),
                        });
                    }
                }
                if let Some(v) = variance.iter().find(|v| **v <= 0.0) {
                    return Err(ConfigError::Range { key: vk, reason: format!("must be positive, got {v}") });
                }
                Ok(Some(PopulationSpec::Gaussian { mean, variance }))
            }
        }
    }

    fn required_population(&self, section: &str, dim: usize) -> CResult<PopulationSpec> {
        self.population(section, dim)?
            .ok_or(ConfigError::Missing { key: format!("{section}.mean"), expected: "a Gaussian mean or a density file" })
    }
}

fn regime_from(t: &Table) -> CResult<Regime> {
    let key = "scenario.regime";
    let name = t.raw(key).ok_or(ConfigError::Missing { key: key.into(), expected: "a regime name" })?;
    let regime = match name {
        "aligned" => Regime::Aligned,
        "competitive" => Regime::CompetitiveCoupled { timescale_ratio: t.float_or("scenario.timescale_ratio", 1.0)? },
        "competitive_fast_x" => Regime::CompetitiveFastX,
        "competitive_fast_rho" => Regime::CompetitiveFastRho,
        "naive" => Regime::NaiveClassifier { fixed_x: t.floats("scenario.fixed_x")? },
        "sampled" => {
            let samples = t.integer("scenario.samples")? as usize;
            Regime::SampledGradient {
                samples,
                seed: if t.has("scenario.seed") { t.integer("scenario.seed")? } else { 0 },
                best_response: t.boolean("scenario.best_response")?,
            }
        }
        "two_populations" => Regime::TwoPopulations,
        "competitive_2d" => Regime::TwoDCompetitive,
        other => {
            return Err(ConfigError::Type {
                key: key.into(),
                expected: "one of aligned, competitive, competitive_fast_x, competitive_fast_rho, naive, sampled, \
                           two_populations, competitive_2d",
                found: other.into(),
            })
        }
    };
    if let Regime::CompetitiveCoupled { timescale_ratio } = regime {
        if timescale_ratio <= 0.0 {
            return Err(ConfigError::Range {
                key: "scenario.timescale_ratio".into(),
                reason: format!("must be positive, got {timescale_ratio}"),
            });
        }
    }
    if let Regime::SampledGradient { samples: 0, .. } = regime {
        return Err(ConfigError::Range { key: "scenario.samples".into(), reason: "need at least one sample".into() });
    }
    // keys that only make sense for a given regime
    let allowed: &[&str] = match regime {
        Regime::CompetitiveCoupled { .. } => &["scenario.timescale_ratio"],
        Regime::NaiveClassifier { .. } => &["scenario.fixed_x"],
        Regime::SampledGradient { .. } => &["scenario.samples", "scenario.seed", "scenario.best_response"],
        _ => &[],
    };
    for k in ["scenario.timescale_ratio", "scenario.fixed_x", "scenario.samples", "scenario.best_response"] {
        if t.has(k) && !allowed.contains(&k) {
            return Err(ConfigError::UnknownKey { key: k.into(), line: t.entries[k].line });
        }
    }
    Ok(regime)
}

impl ScenarioConfig {
    pub fn parse(text: &str, base: &Path) -> CResult<Self> {
        let t = Table::parse(text, base.to_path_buf())?;
        let name = if t.has("scenario.name") { t.string("scenario.name")? } else { "scenario".into() };
        let regime = regime_from(&t)?;

        let lower = t.floats("grid.lower")?;
        let upper = t.floats("grid.upper")?;
        let cells = t.integers("grid.cells")?;
        let dim = lower.len();
        if !(1..=2).contains(&dim) || upper.len() != dim || cells.len() != dim {
            return Err(ConfigError::Range {
                key: "grid.cells".into(),
                reason: "grid.lower, grid.upper and grid.cells need 1 or 2 matching components".into(),
            });
        }
        for k in 0..dim {
            if upper[k] <= lower[k] {
                return Err(ConfigError::Range { key: "grid.upper".into(), reason: "must exceed grid.lower".into() });
            }
            if cells[k] < crate::grid::MIN_CELLS {
                return Err(ConfigError::Range {
                    key: "grid.cells".into(),
                    reason: format!("need at least {} cells per axis", crate::grid::MIN_CELLS),
                });
            }
        }

        let alpha = t.positive("model.alpha")?;
        let beta = t.positive("model.beta")?;
        let cost = match t.raw("model.cost").unwrap_or("logistic") {
            "logistic" => CostSpec::Logistic,
            "logistic2d" => CostSpec::Logistic2d,
            "zero" => CostSpec::Zero,
            other => {
                return Err(ConfigError::Type {
                    key: "model.cost".into(),
                    expected: "logistic, logistic2d or zero",
                    found: other.into(),
                })
            }
        };
        let cost_dim = match cost {
            CostSpec::Logistic => 1,
            CostSpec::Logistic2d => 2,
            CostSpec::Zero => dim,
        };
        if cost_dim != dim {
            return Err(ConfigError::Range { key: "model.cost".into(), reason: format!("does not fit a {dim}D grid") });
        }
        let slope = if cost == CostSpec::Logistic {
            t.positive("model.slope")?
        } else if t.has("model.slope") {
            return Err(ConfigError::UnknownKey { key: "model.slope".into(), line: t.entries["model.slope"].line });
        } else {
            0.0
        };
        let anchor = t.floats("model.anchor")?;
        if anchor.len() != dim {
            return Err(ConfigError::Range { key: "model.anchor".into(), reason: format!("need {dim} component(s)") });
        }
        let initial_x = if t.has("model.initial_x") { t.floats("model.initial_x")? } else { anchor.clone() };
        if initial_x.len() != dim {
            return Err(ConfigError::Range { key: "model.initial_x".into(), reason: format!("need {dim} component(s)") });
        }
        if let Regime::NaiveClassifier { fixed_x } = &regime {
            if fixed_x.len() != dim {
                return Err(ConfigError::Range { key: "scenario.fixed_x".into(), reason: format!("need {dim} component(s)") });
            }
        }
        let kernel = match t.raw("model.kernel").unwrap_or("none") {
            "none" => KernelSpec::None,
            "quadratic" => KernelSpec::Quadratic(t.float_or("model.kernel_scale", 1.0)?),
            "consensus" => KernelSpec::Consensus(t.float_or("model.kernel_scale", 0.05)?),
            other => {
                return Err(ConfigError::Type {
                    key: "model.kernel".into(),
                    expected: "none, quadratic or consensus",
                    found: other.into(),
                })
            }
        };
        if kernel == KernelSpec::None && t.has("model.kernel_scale") {
            return Err(ConfigError::UnknownKey {
                key: "model.kernel_scale".into(),
                line: t.entries["model.kernel_scale"].line,
            });
        }

        let reference = t.required_population("reference", dim)?;
        let initial = t.required_population("initial", dim)?;
        let tau_reference = t.population("tau_reference", dim)?;
        let tau_initial = t.population("tau_initial", dim)?;
        let two = matches!(regime, Regime::TwoPopulations);
        if two && tau_reference.is_none() {
            return Err(ConfigError::Missing { key: "tau_reference.mean".into(), expected: "the reference of tau" });
        }
        // with two moving populations tau takes the place of the static one
        let static_population = match t.population("static", dim)? {
            Some(p) => p,
            None if two => tau_initial.clone().or_else(|| tau_reference.clone()).unwrap(),
            None => t.required_population("static", dim)?,
        };
        if !two && (tau_reference.is_some() || tau_initial.is_some()) {
            return Err(ConfigError::Range {
                key: "tau_reference.mean".into(),
                reason: "tau populations belong to the two_populations regime only".into(),
            });
        }

        let final_time = t.float("time.final")?;
        if final_time < 0.0 {
            return Err(ConfigError::Range { key: "time.final".into(), reason: "must be non-negative".into() });
        }
        let dt = t.positive("time.dt")?;
        let cfl = t.float_or("time.cfl", 0.5)?;
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(ConfigError::Range { key: "time.cfl".into(), reason: format!("must lie in (0, 1], got {cfl}") });
        }
        let sample_stride = if t.has("time.sample_stride") { t.integer("time.sample_stride")? as usize } else { 10 };
        let snapshot_stride = if t.has("time.snapshot_stride") { t.integer("time.snapshot_stride")? as usize } else { 10 };
        for (k, v) in [("time.sample_stride", sample_stride), ("time.snapshot_stride", snapshot_stride)] {
            if v == 0 {
                return Err(ConfigError::Range { key: k.into(), reason: "must be at least 1".into() });
            }
        }
        let output_dir = match t.raw("output.dir") {
            Some(d) => base.join(d),
            None => base.join("out").join(&name),
        };

        Ok(ScenarioConfig {
            name,
            regime,
            lower,
            upper,
            cells,
            alpha,
            beta,
            cost,
            slope,
            anchor,
            initial_x,
            kernel,
            reference,
            static_population,
            initial,
            tau_reference,
            tau_initial,
            final_time,
            dt,
            cfl,
            sample_stride,
            snapshot_stride,
            output_dir,
        })
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let axes = (0..self.lower.len())
            .map(|k| Axis::new(self.lower[k], self.upper[k], self.cells[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(Grid::from_axes(axes)?))
    }

    fn density(spec: &PopulationSpec, grid: &Arc<Grid>) -> Result<Density> {
        match spec {
            PopulationSpec::Gaussian { mean, variance } => Density::gaussian(grid.clone(), mean, variance),
            PopulationSpec::File(path) => Density::load_csv(grid.clone(), path),
        }
    }

    fn reference_from(spec: &PopulationSpec, grid: &Arc<Grid>) -> Result<Reference> {
        match spec {
            PopulationSpec::Gaussian { mean, variance } => {
                Reference::gaussian(grid.clone(), Gaussian::new(mean.clone(), variance.clone())?)
            }
            PopulationSpec::File(path) => Ok(Reference::tabulated(Density::load_csv(grid.clone(), path)?)),
        }
    }

    pub fn model(&self) -> Result<EnergyModel> {
        let grid = self.grid()?;
        let cost = match self.cost {
            CostSpec::Logistic => Cost::logistic(self.slope)?,
            CostSpec::Logistic2d => Cost::Logistic2d,
            CostSpec::Zero => Cost::Zero { dim: grid.dim() },
        };
        let kernel = match self.kernel {
            KernelSpec::None => InteractionKernel::None,
            KernelSpec::Quadratic(weight) => InteractionKernel::Quadratic { weight },
            KernelSpec::Consensus(scale) => InteractionKernel::Consensus { scale },
        };
        EnergyModel::new(
            cost,
            kernel,
            Self::reference_from(&self.reference, &grid)?,
            Self::density(&self.static_population, &grid)?,
            self.alpha,
            self.beta,
            self.anchor.clone(),
        )
    }

    pub fn time(&self) -> TimeSettings {
        TimeSettings { final_time: self.final_time, dt: self.dt, cfl: self.cfl, sample_stride: self.sample_stride }
    }

    /// Builds the runnable scenario (discretizes populations, reads files).
    pub fn build(&self) -> Result<Scenario> {
        let model = self.model()?;
        let grid = model.grid().clone();
        let rho = Self::density(&self.initial, &grid)?;
        let (tau, tau_reference) = match &self.tau_reference {
            Some(spec) => {
                let reference = Self::reference_from(spec, &grid)?;
                let tau = match &self.tau_initial {
                    Some(s) => Self::density(s, &grid)?,
                    None => reference.density().clone(),
                };
                (Some(tau), Some(reference))
            }
            None => (None, None),
        };
        let initial = initial_state(&model, rho, self.initial_x.clone(), tau)?;
        let scenario = Scenario { model, regime: self.regime.clone(), initial, time: self.time(), tau_reference };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn list<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

fn write_population(out: &mut String, section: &str, spec: &PopulationSpec) {
    match spec {
        PopulationSpec::Gaussian { mean, variance } => {
            let _ = writeln!(out, "{section}.mean = {}", list(mean));
            let _ = writeln!(out, "{section}.variance = {}", list(variance));
        }
        PopulationSpec::File(p) => {
            let _ = writeln!(out, "{section}.file = {}", p.display());
        }
    }
}

/// Serializes a config so that [`ScenarioConfig::parse`] reads it back
/// unchanged. Paths are written as stored.
pub fn write_config(c: &ScenarioConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario.name = {}", c.name);
    let _ = writeln!(s, "scenario.regime = {}", c.regime.name());
    match &c.regime {
        Regime::CompetitiveCoupled { timescale_ratio } => {
            let _ = writeln!(s, "scenario.timescale_ratio = {timescale_ratio:?}");
        }
        Regime::NaiveClassifier { fixed_x } => {
            let _ = writeln!(s, "scenario.fixed_x = {}", list(fixed_x));
        }
        Regime::SampledGradient { samples, seed, best_response } => {
            let _ = writeln!(s, "scenario.samples = {samples}");
            let _ = writeln!(s, "scenario.seed = {seed}");
            let _ = writeln!(s, "scenario.best_response = {best_response}");
        }
        _ => {}
    }
    let _ = writeln!(s, "grid.lower = {}", list(&c.lower));
    let _ = writeln!(s, "grid.upper = {}", list(&c.upper));
    let _ = writeln!(s, "grid.cells = {}", list(&c.cells));
    let _ = writeln!(s, "model.alpha = {:?}", c.alpha);
    let _ = writeln!(s, "model.beta = {:?}", c.beta);
    match c.cost {
        CostSpec::Logistic => {
            let _ = writeln!(s, "model.cost = logistic");
            let _ = writeln!(s, "model.slope = {:?}", c.slope);
        }
        CostSpec::Logistic2d => {
            let _ = writeln!(s, "model.cost = logistic2d");
        }
        CostSpec::Zero => {
            let _ = writeln!(s, "model.cost = zero");
        }
    }
    let _ = writeln!(s, "model.anchor = {}", list(&c.anchor));
    let _ = writeln!(s, "model.initial_x = {}", list(&c.initial_x));
    match c.kernel {
        KernelSpec::None => {
            let _ = writeln!(s, "model.kernel = none");
        }
        KernelSpec::Quadratic(w) => {
            let _ = writeln!(s, "model.kernel = quadratic\nmodel.kernel_scale = {w:?}");
        }
        KernelSpec::Consensus(w) => {
            let _ = writeln!(s, "model.kernel = consensus\nmodel.kernel_scale = {w:?}");
        }
    }
    write_population(&mut s, "reference", &c.reference);
    write_population(&mut s, "static", &c.static_population);
    write_population(&mut s, "initial", &c.initial);
    if let Some(p) = &c.tau_reference {
        write_population(&mut s, "tau_reference", p);
    }
    if let Some(p) = &c.tau_initial {
        write_population(&mut s, "tau_initial", p);
    }
    let _ = writeln!(s, "time.final = {:?}", c.final_time);
    let _ = writeln!(s, "time.dt = {:?}", c.dt);
    let _ = writeln!(s, "time.cfl = {:?}", c.cfl);
    let _ = writeln!(s, "time.sample_stride = {}", c.sample_stride);
    let _ = writeln!(s, "time.snapshot_stride = {}", c.snapshot_stride);
    let _ = writeln!(s, "output.dir = {}", c.output_dir.display());
    s
}

/// Reads and validates a scenario file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(ConfigError::File { path: path.to_path_buf(), reason: e.to_string() }))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(ScenarioConfig::parse(&text, &base)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
scenario.name = t
scenario.regime = competitive
grid.lower = -4
grid.upper = 6
grid.cells = 200
model.alpha = 0.1
model.beta = 0.05
model.slope = 3
model.anchor = 1.5
reference.mean = -0.5
reference.variance = 0.07
static.mean = 1
static.variance = 0.25
initial.mean = 0
initial.variance = 0.25
time.final = 1
time.dt = 0.01
";

    fn parse(text: &str) -> CResult<ScenarioConfig> {
        ScenarioConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn parses_minimal_config() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.regime, Regime::CompetitiveCoupled { timescale_ratio: 1.0 });
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.cfl, 0.5);
        assert_eq!(c.initial_x, vec![1.5]);
        assert!(c.build().is_ok());
    }

    #[test]
    fn zero_dt_is_a_range_error() {
        let text = BASE.replace("time.dt = 0.01", "time.dt = 0");
        assert!(matches!(parse(&text), Err(ConfigError::Range { key, .. }) if key == "time.dt"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{BASE}model.alpha2 = 3\n");
        assert!(matches!(parse(&text), Err(ConfigError::UnknownKey { key, line: 18 }) if key == "model.alpha2"));
    }

    #[test]
    fn ill_typed_value_names_key() {
        let text = BASE.replace("model.beta = 0.05", "model.beta = lots");
        let err = parse(&text).unwrap_err();
        assert!(matches!(&err, ConfigError::Type { key, .. } if key == "model.beta"));
        assert!(err.to_string().contains("a number"));
    }

    #[test]
    fn missing_key_names_key() {
        let text = BASE.replace("model.alpha = 0.1\n", "");
        assert!(matches!(parse(&text), Err(ConfigError::Missing { key, .. }) if key == "model.alpha"));
    }

    #[test]
    fn negative_alpha_is_a_range_error() {
        let text = BASE.replace("model.alpha = 0.1", "model.alpha = -1");
        assert!(matches!(parse(&text), Err(ConfigError::Range { key, .. }) if key == "model.alpha"));
    }

    #[test]
    fn duplicate_key_is_a_syntax_error() {
        let text = format!("{BASE}time.dt = 0.02\n");
        assert!(matches!(parse(&text), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn missing_file_is_reported() {
        let text = BASE.replace("initial.mean = 0\ninitial.variance = 0.25\n", "initial.file = nowhere.csv\n");
        assert!(matches!(parse(&text), Err(ConfigError::File { .. })));
    }

    #[test]
    fn round_trip() {
        let c = parse(BASE).unwrap();
        let back = parse(&write_config(&c)).unwrap();
        assert_eq!(c, back);
    }
}
