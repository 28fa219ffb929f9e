//! Finite-volume simulation of a strategic population and a retraining
//! classifier evolving as coupled Wasserstein gradient flows.
//!
//! The population `rho` moves in attribute space `z` by the transport equation
//! `d_t rho = ±div(rho grad xi)`, where `xi` is the first variation of an energy
//! that mixes the classifier's costs, relative entropy to a reference measure
//! and a nonlocal interaction. The classifier parameter `x` follows the
//! gradient of the same energy. Depending on the [`dynamics::Regime`] the two
//! either descend a shared energy, play a min-max game, or one of them
//! best-responds to the other.
//!
//! Modules:
//! - [`grid`]: cell grids and cell-averaged densities
//! - [`model`]: costs, kernels, reference measure and energies
//! - [`fv`]: the upwind transport step
//! - [`dynamics`]: best responses, coupled stepping, trajectories
//! - [`diagnostics`]: Wasserstein distances, decay fits, functional inequalities
//! - [`config`] and [`cli`]: scenario files and the `driftflow` command

pub mod error;
pub mod grid;
pub mod model;
pub mod fv;
pub mod dynamics;
pub mod diagnostics;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use grid::{Axis, Density, Grid, PointCloud};
pub use model::{Cost, EnergyModel, Gaussian, InteractionKernel, Objective, Reference};
