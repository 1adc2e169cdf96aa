//! Cross-validation, synthetic data and reference oracles.

pub mod cv;
pub mod quadrature;
pub mod stats;
pub mod synthetic;
