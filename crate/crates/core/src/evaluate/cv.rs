//! Exact-refit cross-validation: leave one observation out (CV1) and leave
//! one location out (CV2).
//!
//! The first time point is never held out and never scored, because the
//! anchor makes its predictive density a point mass. Folds whose refit has
//! split-Rhat at or above the threshold are kept in the report but excluded
//! from the aggregates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ModelConfig, PredictConfig, SamplerConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::stats::{ks_uniform, KsResult};
use crate::fit::{build_model, fit_model, fit_model_warm, WarmStart, RHAT_THRESHOLD};
use crate::numeric::{log_mean_exp, normal_logpdf, quantile_sorted};
use crate::predict::Predictor;

/// Aggregates reported for the original instrument data: ELPD and MSE with
/// and without derivative information. Documentation only; the data behind
/// them is not available.
pub mod reference {
    pub const CV1_ELPD_WITH: f64 = -0.61;
    pub const CV1_ELPD_WITHOUT: f64 = -0.78;
    pub const CV1_MSE_WITH: f64 = 0.13;
    pub const CV1_MSE_WITHOUT: f64 = 0.14;
    pub const CV2_ELPD_WITH: f64 = -11.70;
    pub const CV2_ELPD_WITHOUT: f64 = -33.39;
    pub const CV2_MSE_WITH: f64 = 3.09;
    pub const CV2_MSE_WITHOUT: f64 = 4.42;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Cv1,
    Cv2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldRecord {
    /// 1-based location index.
    pub location: usize,
    pub location_id: String,
    /// 1-based held-out time index (CV1 only).
    pub time_index: Option<usize>,
    /// Log predictive density of the held-out data.
    pub elpd: f64,
    /// Squared error (CV1) or mean squared error over the scored times (CV2).
    pub squared_error: f64,
    pub pit: Option<f64>,
    /// Mean width of the 95% predictive intervals over the scored points.
    pub interval_width: f64,
    /// Fraction of scored points inside their 95% interval.
    pub coverage95: f64,
    pub max_rhat: f64,
    pub converged: bool,
    pub rejection_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub scheme: Scheme,
    /// `with-derivatives` or `without-derivatives`.
    pub model: String,
    pub n_folds: usize,
    /// Folds left out of the aggregates for lack of convergence.
    pub n_excluded: usize,
    pub elpd_mean: f64,
    pub elpd_sum: f64,
    pub mse: f64,
    pub mean_interval_width: f64,
    pub coverage95: f64,
    /// Uniformity test of the PIT values (CV1 only).
    pub pit_ks: Option<KsResult>,
    pub folds: Vec<FoldRecord>,
}

impl CvReport {
    /// Aggregates in a canonical fold order, so the result does not depend
    /// on the order in which folds were evaluated.
    pub fn from_folds(scheme: Scheme, model: &ModelConfig, mut folds: Vec<FoldRecord>) -> CvReport {
        folds.sort_by_key(|f| (f.location, f.time_index));
        let kept: Vec<&FoldRecord> = folds.iter().filter(|f| f.converged).collect();
        let n = kept.len() as f64;
        let mean = |g: &dyn Fn(&FoldRecord) -> f64| kept.iter().map(|f| g(f)).sum::<f64>() / n;
        let elpd_sum = kept.iter().map(|f| f.elpd).sum::<f64>();
        let pits: Vec<f64> = kept.iter().filter_map(|f| f.pit).collect();
        CvReport {
            scheme,
            model: if model.has_derivatives() {
                "with-derivatives"
            } else {
                "without-derivatives"
            }
            .into(),
            n_folds: folds.len(),
            n_excluded: folds.len() - kept.len(),
            elpd_mean: elpd_sum / n,
            elpd_sum,
            mse: mean(&|f| f.squared_error),
            mean_interval_width: mean(&|f| f.interval_width),
            coverage95: mean(&|f| f.coverage95),
            pit_ks: (scheme == Scheme::Cv1 && !pits.is_empty()).then(|| ks_uniform(&pits)),
            folds,
        }
    }

    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

/// A seed that depends on the fold identity only.
fn fold_seed(base: u64, key: usize) -> u64 {
    base ^ ((key as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn fold_sampler(cfg: &SamplerConfig, key: usize) -> SamplerConfig {
    SamplerConfig {
        seed: fold_seed(cfg.seed, key),
        ..cfg.clone()
    }
}

/// Every CV1 fold `(t, i)` (0-based) in canonical order.
pub fn cv1_folds(ds: &Dataset) -> Vec<(usize, usize)> {
    (0..ds.n_locations())
        .flat_map(|i| (1..ds.n_times()).map(move |t| (t, i)))
        .collect()
}

pub fn cv1(ds: &Dataset, model_cfg: &ModelConfig, sampler_cfg: &SamplerConfig) -> Result<CvReport> {
    cv1_with_folds(ds, model_cfg, sampler_cfg, &cv1_folds(ds))
}

/// CV1 restricted to the given `(t, i)` folds, evaluated in the given order.
pub fn cv1_with_folds(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    sampler_cfg: &SamplerConfig,
    folds: &[(usize, usize)],
) -> Result<CvReport> {
    sampler_cfg.validate()?;
    let (t_len, n) = (ds.n_times(), ds.n_locations());
    if let Some(&(t, i)) = folds.iter().find(|&&(t, i)| t == 0 || t >= t_len || i >= n) {
        return Err(Error::Dimension(format!(
            "invalid CV1 fold (t={}, i={})",
            t + 1,
            i + 1
        )));
    }
    let (base, inputs) = build_model(ds, model_cfg)?;
    // Every fold differs from the full data by one observation, so all fold
    // chains start from the full-data posterior.
    let full = fit_model(base.clone(), inputs.clone(), sampler_cfg)?;
    let warm = WarmStart::from_fit(&full)?;
    let records = folds
        .par_iter()
        .map(|&(t, i)| {
            let mut model = base.clone();
            model.hold_out(t, i);
            let key = i * t_len + t;
            let fit = fit_model_warm(
                model,
                inputs.clone(),
                &fold_sampler(sampler_cfg, key),
                &warm,
            )?;
            let y = ds.y[(t, i)];
            let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(sampler_cfg.seed, key + n * t_len));
            let mut log_dens = Vec::with_capacity(fit.draws.total_draws());
            let mut ystar = Vec::with_capacity(fit.draws.total_draws());
            let mut fsum = 0.0;
            for values in fit.draws.iter_draws() {
                let state = fit.model.state_from_values(values);
                let (f, _) = fit.model.curves(&state);
                let (ft, sigma) = (f[(t, i)], state.hyper.sigma);
                log_dens.push(normal_logpdf(y, ft, sigma));
                let z: f64 = StandardNormal.sample(&mut rng);
                ystar.push(ft + sigma * z);
                fsum += ft;
            }
            let s = ystar.len() as f64;
            let pit = ystar.iter().filter(|&&v| v <= y).count() as f64 / s;
            ystar.sort_by(f64::total_cmp);
            let (lo, hi) = (
                quantile_sorted(&ystar, 0.025),
                quantile_sorted(&ystar, 0.975),
            );
            let mean = fsum / s;
            log::info!(
                "cv1 fold t={} i={}: max rhat {:.3}",
                t + 1,
                i + 1,
                fit.diagnostics.max_rhat
            );
            Ok(FoldRecord {
                location: i + 1,
                location_id: ds.location_ids[i].clone(),
                time_index: Some(t + 1),
                elpd: log_mean_exp(&log_dens),
                squared_error: (y - mean) * (y - mean),
                pit: Some(pit),
                interval_width: hi - lo,
                coverage95: if lo <= y && y <= hi { 1.0 } else { 0.0 },
                max_rhat: fit.diagnostics.max_rhat,
                converged: fit.diagnostics.max_rhat < RHAT_THRESHOLD,
                rejection_rate: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(Scheme::Cv1, model_cfg, records))
}

pub fn cv2(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    sampler_cfg: &SamplerConfig,
    predict_cfg: &PredictConfig,
) -> Result<CvReport> {
    let n = ds.n_locations();
    if n < 3 {
        return Err(Error::Dimension(format!(
            "leave-one-location-out needs at least 3 locations, got {n}"
        )));
    }
    sampler_cfg.validate()?;
    let t_len = ds.n_times();
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let train = ds.without_location(i)?;
            let (model, inputs) = build_model(&train, model_cfg)?;
            let fit = fit_model(model, inputs, &fold_sampler(sampler_cfg, i))?;
            let predictor = Predictor::new(&fit.model, &fit.draws)?;
            let xstar = fit.inputs.apply(&ds.raw_input(i));
            let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(sampler_cfg.seed, n + i));
            let series = predictor.predict_location(&xstar, predict_cfg, &mut rng)?;
            let mut elpd = 0.0;
            let mut se = 0.0;
            let mut width = 0.0;
            let mut covered = 0.0;
            for t in 1..t_len {
                let y = ds.y[(t, i)];
                let terms: Vec<f64> = (0..series.n_retained())
                    .map(|r| normal_logpdf(y, series.latent[(r, t)], series.sigma[r]))
                    .collect();
                elpd += log_mean_exp(&terms);
                let e = y - series.latent_mean[t];
                se += e * e;
                width += series.upper95[t] - series.lower95[t];
                if series.lower95[t] <= y && y <= series.upper95[t] {
                    covered += 1.0;
                }
            }
            let scored = (t_len - 1) as f64;
            log::info!(
                "cv2 fold i={}: max rhat {:.3}",
                i + 1,
                fit.diagnostics.max_rhat
            );
            Ok(FoldRecord {
                location: i + 1,
                location_id: ds.location_ids[i].clone(),
                time_index: None,
                elpd,
                squared_error: se / scored,
                pit: None,
                interval_width: width / scored,
                coverage95: covered / scored,
                max_rhat: fit.diagnostics.max_rhat,
                converged: fit.diagnostics.max_rhat < RHAT_THRESHOLD,
                rejection_rate: Some(series.rejection_rate),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(Scheme::Cv2, model_cfg, records))
}
