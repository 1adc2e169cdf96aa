//! Run configuration, read from TOML. Every field has a default so an empty
//! file (or no file at all) is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::StandardizeOptions;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    /// Half-normal scale for `alpha`.
    pub alpha_scale: f64,
    /// Half-normal scale for `sigma`.
    pub sigma_scale: f64,
    /// Gamma shape/rate for every lengthscale.
    pub rho_shape: f64,
    pub rho_rate: f64,
    /// Normal scale for linear coefficients that remain free parameters.
    pub beta_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            alpha_scale: 1.0,
            sigma_scale: 1.0,
            rho_shape: 1.0,
            rho_rate: 0.1,
            beta_scale: 1.0,
        }
    }
}

/// Hyperparameters held at fixed values instead of being sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedHyper {
    pub alpha: Option<Vec<f64>>,
    pub rho: Option<[f64; 4]>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of spline knots.
    pub knots: usize,
    /// Probit strictness of the derivative-sign observations.
    pub v: f64,
    pub penalty_power: f64,
    pub per_knot_alpha: bool,
    /// Sign observations on the derivative at every grid point.
    pub monotonicity: bool,
    /// Zero derivative at the last time point.
    pub saturation: bool,
    /// Replace the exact anchor/saturation constraints by narrow Gaussians
    /// with standard deviation `sigma_eps`, keeping `beta` as free parameters.
    pub soft_constraints: bool,
    pub sigma_eps: f64,
    pub priors: Priors,
    pub inputs: StandardizeOptions,
    pub fixed: FixedHyper,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            knots: 3,
            v: 1e-4,
            penalty_power: 2.0,
            per_knot_alpha: false,
            monotonicity: true,
            saturation: true,
            soft_constraints: false,
            sigma_eps: 1e-3,
            priors: Priors::default(),
            inputs: StandardizeOptions::default(),
            fixed: FixedHyper::default(),
        }
    }
}

impl ModelConfig {
    /// The comparison model: zero anchor only, no derivative information.
    pub fn without_derivatives(mut self) -> Self {
        self.monotonicity = false;
        self.saturation = false;
        self
    }

    pub fn has_derivatives(&self) -> bool {
        self.monotonicity || self.saturation
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots == 0 {
            return Err(Error::Config("model.knots must be at least 1".into()));
        }
        if !(self.v > 0.0) {
            return Err(Error::Config("model.v must be positive".into()));
        }
        if !(self.penalty_power > 0.0) {
            return Err(Error::Config("model.penalty_power must be positive".into()));
        }
        if self.soft_constraints && !(self.sigma_eps > 0.0) {
            return Err(Error::Config("model.sigma_eps must be positive".into()));
        }
        let p = &self.priors;
        if [
            p.alpha_scale,
            p.sigma_scale,
            p.rho_shape,
            p.rho_rate,
            p.beta_scale,
        ]
        .iter()
        .any(|v| !(*v > 0.0))
        {
            return Err(Error::Config("prior parameters must be positive".into()));
        }
        if let Some(a) = &self.fixed.alpha {
            let expect = if self.per_knot_alpha { self.knots } else { 1 };
            if a.len() != expect {
                return Err(Error::Config(format!("fixed.alpha needs {expect} entries")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Nuts,
    /// Fixed number of leapfrog steps per transition.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub leapfrog_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 3,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 1,
            algorithm: Algorithm::Nuts,
            leapfrog_steps: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Config(format!(
                "split-Rhat is undefined for {} chain(s); use at least 2",
                self.chains
            )));
        }
        if self.samples < 4 {
            return Err(Error::Config("need at least 4 samples per chain".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.max_treedepth == 0 || self.leapfrog_steps == 0 {
            return Err(Error::Config(
                "tree depth and leapfrog steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Conditional resamples before a non-monotone draw is discarded.
    pub max_attempts: usize,
    /// Tolerance below zero for a predicted derivative to count as monotone.
    pub monotone_tol: f64,
    /// Time indices (1-based) rendered as graymaps by `map`.
    pub map_times: Vec<usize>,
    /// Pixels processed per block by `map`.
    pub block_size: usize,
    /// Upper end of the ΔE* gray ramp; 0 means the map maximum.
    pub gray_max: f64,
    pub perceptible_threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            max_attempts: 50,
            monotone_tol: 1e-6,
            map_times: vec![3, 4, 5, 6, 11],
            block_size: 1024,
            gray_max: 0.0,
            perceptible_threshold: 3.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub predict: PredictConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
