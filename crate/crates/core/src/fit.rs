//! End-to-end fitting: standardization, model construction and sampling.

use crate::config::{ModelConfig, SamplerConfig};
use crate::data::{standardize_inputs, Dataset, StandardizedInputs};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::{run_hmc, Diagnostics, LogDensity, PosteriorDraws};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Split-Rhat below which a fit counts as converged.
pub const RHAT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Model,
    pub inputs: StandardizedInputs,
    pub draws: PosteriorDraws,
    pub diagnostics: Diagnostics,
}

/// Standardizes the inputs of `ds` and builds its posterior.
pub fn build_model(ds: &Dataset, cfg: &ModelConfig) -> Result<(Model, StandardizedInputs)> {
    let inputs = standardize_inputs(&ds.x_raw, cfg.inputs)?;
    let model = Model::new(&ds.y, &inputs.x, &ds.times, cfg)?;
    Ok((model, inputs))
}

pub fn fit(ds: &Dataset, model_cfg: &ModelConfig, sampler_cfg: &SamplerConfig) -> Result<Fit> {
    let (model, inputs) = build_model(ds, model_cfg)?;
    fit_model(model, inputs, sampler_cfg)
}

pub fn fit_model(
    model: Model,
    inputs: StandardizedInputs,
    sampler_cfg: &SamplerConfig,
) -> Result<Fit> {
    let draws = run_hmc(&model, sampler_cfg)?;
    let diagnostics = draws.diagnostics(sampler_cfg.max_treedepth);
    Ok(Fit {
        model,
        inputs,
        draws,
        diagnostics,
    })
}

/// Starting information borrowed from an earlier fit of a closely related
/// posterior: chains begin at its draws and with its adapted metric. Warmup
/// still runs in full, so the result is an ordinary refit.
#[derive(Debug, Clone)]
pub struct WarmStart {
    /// Unconstrained points.
    pub points: Vec<Vec<f64>>,
    pub inv_metric: Vec<f64>,
}

impl WarmStart {
    pub fn from_fit(fit: &Fit) -> Result<WarmStart> {
        let points = fit
            .draws
            .iter_draws()
            .map(|v| fit.model.from_natural(v))
            .collect::<Result<Vec<_>>>()?;
        let chains = &fit.draws.chains;
        let dim = fit.model.dim();
        let mut inv_metric = vec![0.0; dim];
        for c in chains {
            if c.inv_metric.len() != dim {
                return Err(Error::Dimension(
                    "warm-start fit has no adapted metric".into(),
                ));
            }
            for (m, v) in inv_metric.iter_mut().zip(&c.inv_metric) {
                *m += v / chains.len() as f64;
            }
        }
        if points.is_empty() {
            return Err(Error::Dimension("warm-start fit has no draws".into()));
        }
        Ok(WarmStart { points, inv_metric })
    }
}

struct WarmTarget<'a> {
    model: &'a Model,
    warm: &'a WarmStart,
}

impl LogDensity for WarmTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.model.logp_grad(x, grad)
    }
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.warm.points[rng.random_range(0..self.warm.points.len())].clone()
    }
    fn param_names(&self) -> Vec<String> {
        self.model.param_names()
    }
    fn initial_inv_metric(&self) -> Vec<f64> {
        self.warm.inv_metric.clone()
    }
    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        self.model.to_natural(x)
    }
}

/// Like [`fit_model`], with chains started from `warm`.
pub fn fit_model_warm(
    model: Model,
    inputs: StandardizedInputs,
    sampler_cfg: &SamplerConfig,
    warm: &WarmStart,
) -> Result<Fit> {
    if warm.inv_metric.len() != model.dim() {
        return Err(Error::Dimension(
            "warm start does not match the model dimension".into(),
        ));
    }
    let draws = run_hmc(
        &WarmTarget {
            model: &model,
            warm,
        },
        sampler_cfg,
    )?;
    let diagnostics = draws.diagnostics(sampler_cfg.max_treedepth);
    Ok(Fit {
        model,
        inputs,
        draws,
        diagnostics,
    })
}

impl Fit {
    pub fn converged(&self) -> bool {
        self.diagnostics
            .params
            .iter()
            .all(|p| p.rhat < RHAT_THRESHOLD)
    }

    /// Fails with a convergence error naming every parameter at or above the
    /// threshold.
    pub fn require_convergence(&self) -> Result<()> {
        let bad: Vec<String> = self
            .diagnostics
            .params
            .iter()
            .filter(|p| !(p.rhat < RHAT_THRESHOLD))
            .map(|p| format!("{} (rhat {:.3})", p.name, p.rhat))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Convergence(format!(
                "split-Rhat >= {RHAT_THRESHOLD} for {}; rerun with more warmup or pass --force",
                bad.join(", ")
            )))
        }
    }
}
