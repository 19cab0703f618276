//! Hierarchical neural time-steppers for dynamical systems.
//!
//! A family of residual networks, each trained to approximate the flow map of
//! an ODE at one fixed step size, is coupled across scales into a single
//! multiscale rollout. The same coupling can hand the fine scale over to a
//! classical Runge-Kutta integrator (the hybrid scheme). The [`bench`] module
//! drives the full train/select/evaluate pipeline from TOML configs.
//!
//! Module map:
//! - [`dynamics`]: built-in vector fields and ground-truth trajectories.
//! - [`integrators`]: explicit Runge-Kutta stepping, single and batched.
//! - [`dataset`]: sampling, striding, noise injection and the binary dataset format.
//! - [`flowmap`]: the residual MLP, its multi-step loss, Adam training and model files.
//! - [`multiscale`]: the vectorized hierarchical rollout and cross-validation.
//! - [`hybrid`]: neural anchors plus batched Runge-Kutta fill-in.
//! - [`bench`]: error metrics, timing, increment fields and the experiment runner.

pub mod bench;
pub mod dataset;
pub mod dynamics;
mod error;
pub mod flowmap;
pub mod hybrid;
pub mod integrators;
pub mod multiscale;
pub mod rng;

pub use error::{Error, Result};
