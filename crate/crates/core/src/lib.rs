//! Spatially correlated, shape-constrained penalized-spline models for
//! short time series observed at many locations.
//!
//! Each location carries a quadratic-basis penalized spline whose
//! coefficients share a Gaussian-process prior over location covariates.
//! Derivative-sign observations make the curves monotone, exact constraints
//! anchor them at zero and make them level off, and the joint posterior is
//! explored with Hamiltonian Monte Carlo.

pub mod basis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod fit;
pub mod io;
pub mod kernel;
pub mod model;
pub mod numeric;
pub mod predict;
pub mod sampler;

pub use error::{Error, Result};
