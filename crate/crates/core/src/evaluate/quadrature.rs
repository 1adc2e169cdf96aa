//! Brute-force posterior moments for tiny models, as a check on the sampler.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::CovMatrix;
use crate::model::Model;

pub const GRID_POINTS: usize = 400;
/// Half-width of the grid in prior standard deviations.
pub const GRID_HALF_WIDTH: f64 = 8.0;
/// Half-width of the refined grids in posterior standard deviations.
pub const REFINED_HALF_WIDTH: f64 = 12.0;
const REFINEMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMoments {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior mean and covariance of the (at most two) free coefficients of a
/// model whose hyperparameters are all fixed, by midpoint quadrature over
/// [`GRID_POINTS`] cells per dimension spanning ±[`GRID_HALF_WIDTH`] prior
/// standard deviations, then refined twice to ±[`REFINED_HALF_WIDTH`]
/// posterior standard deviations around the current mean.
pub fn grid_posterior_oracle(model: &Model) -> Result<GridMoments> {
    let l = &model.layout;
    if l.alpha_free || l.rho_free || l.sigma_free {
        return Err(Error::Config(
            "the quadrature oracle needs every hyperparameter fixed".into(),
        ));
    }
    let dim = l.dim();
    if dim == 0 || dim > 2 {
        return Err(Error::Dimension(format!(
            "the quadrature oracle handles 1 or 2 latent dimensions, got {dim}"
        )));
    }
    let probe = model.state_from_values(&vec![0.0; dim]);
    let cov = CovMatrix::factorize(model.correlation(&probe.hyper.rho))?;
    let prior_sd: Vec<f64> = (0..dim)
        .map(|j| {
            if j < l.n_b() {
                let (k, i) = (j / l.n, j % l.n);
                (probe.hyper.alpha_for(k) * cov.c[(i, i)]).sqrt()
            } else {
                model.config.priors.beta_scale
            }
        })
        .collect();
    let log_post = |x: &[f64]| -> Result<f64> {
        let s = model.state_from_values(x);
        Ok(model.log_likelihood(&s)? + model.log_prior(&s, &cov)?)
    };
    // Locate the mass on a prior-scaled grid, then refine around it so the
    // cells end up much narrower than the posterior spread.
    let mut centre = vec![0.0; dim];
    let mut half: Vec<f64> = prior_sd.iter().map(|s| GRID_HALF_WIDTH * s).collect();
    let (mut mean, mut c) = grid_moments(dim, &centre, &half, &log_post)?;
    for _ in 0..REFINEMENTS {
        for j in 0..dim {
            let cell = 2.0 * half[j] / GRID_POINTS as f64;
            half[j] = REFINED_HALF_WIDTH * c[(j, j)].sqrt().max(cell);
        }
        centre.clone_from(&mean);
        (mean, c) = grid_moments(dim, &centre, &half, &log_post)?;
    }
    Ok(GridMoments {
        names: l.names(),
        mean,
        cov: c,
    })
}

/// Midpoint-rule mean and covariance over the box `centre ± half`.
fn grid_moments(
    dim: usize,
    centre: &[f64],
    half: &[f64],
    log_post: &dyn Fn(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            let h = 2.0 * half[j] / GRID_POINTS as f64;
            (0..GRID_POINTS)
                .map(|p| centre[j] - half[j] + (p as f64 + 0.5) * h)
                .collect()
        })
        .collect();
    let n_cells = GRID_POINTS.pow(dim as u32);
    let mut points = Vec::with_capacity(n_cells);
    let mut lps = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let x: Vec<f64> = (0..dim)
            .map(|j| axes[j][(cell / GRID_POINTS.pow(j as u32)) % GRID_POINTS])
            .collect();
        lps.push(log_post(&x)?);
        points.push(x);
    }
    let top = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numerical(
            "posterior is zero on the whole grid".into(),
        ));
    }
    let w: Vec<f64> = lps.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut mean = vec![0.0; dim];
    for (x, wi) in points.iter().zip(&w) {
        for j in 0..dim {
            mean[j] += wi * x[j] / z;
        }
    }
    let mut c = DMatrix::zeros(dim, dim);
    for (x, wi) in points.iter().zip(&w) {
        for a in 0..dim {
            for b in 0..dim {
                c[(a, b)] += wi * (x[a] - mean[a]) * (x[b] - mean[b]) / z;
            }
        }
    }
    Ok((mean, c))
}
