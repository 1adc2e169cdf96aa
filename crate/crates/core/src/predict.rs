//! Posterior predictive series at new locations and mean fading maps over
//! pixel grids.
//!
//! For every posterior draw the coefficients at a new input are drawn from
//! the GP conditional given that draw's coefficients at the training
//! locations. The constraints are then imposed exactly through elimination,
//! and draws that violate monotonicity are redrawn a bounded number of times
//! before being discarded.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::PredictConfig;
use crate::data::{PixelGrid, INPUT_DIM};
use crate::error::{Error, Result};
use crate::kernel::{gp_conditional, CovMatrix, Hyperparams, SqDistances};
use crate::model::{dot, Model, SeriesDesign, SeriesMode};
use crate::numeric::{fmt17, quantile_sorted};
use crate::sampler::PosteriorDraws;

/// Colour difference above which a change is perceptible to the eye.
pub const PERCEPTIBLE_DELTA_E: f64 = 3.5;

pub fn perceptible(mean: f64, threshold: f64) -> bool {
    mean > threshold
}

struct PreparedDraw {
    /// `K×N` coefficients at the training locations.
    b: DMatrix<f64>,
    /// `K×N`, rows `C⁻¹·b_k`.
    a: DMatrix<f64>,
    hyper: Hyperparams,
    cov: CovMatrix,
}

/// Posterior draws prepared for repeated conditioning.
pub struct Predictor<'a> {
    model: &'a Model,
    design: SeriesDesign,
    draws: Vec<PreparedDraw>,
}

/// Predictive distribution of a complete series at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSeries {
    pub xstar: [f64; INPUT_DIM],
    /// Retained draws of `y*`, `S×T`.
    pub draws: DMatrix<f64>,
    /// Retained latent curves `f*`, `S×T`.
    pub latent: DMatrix<f64>,
    /// Their time derivatives, `S×T`.
    pub derivative: DMatrix<f64>,
    /// Retained coefficients `b*`, `S×K`.
    pub b_star: DMatrix<f64>,
    /// Noise scale of the posterior draw behind each retained row.
    pub sigma: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
    pub latent_mean: Vec<f64>,
    /// Monte Carlo standard error of `latent_mean`, treating draws as independent.
    pub latent_mcse: Vec<f64>,
    /// Fraction of posterior draws discarded by the monotonicity screen.
    pub rejection_rate: f64,
}

impl PredictiveSeries {
    pub fn n_retained(&self) -> usize {
        self.draws.nrows()
    }

    pub fn write_csv(&self, times: &[f64], w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,mean,lower95,upper95,rejection_rate")?;
        for (t, tv) in times.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt17(*tv),
                fmt17(self.mean[t]),
                fmt17(self.lower95[t]),
                fmt17(self.upper95[t]),
                fmt17(self.rejection_rate)
            )?;
        }
        Ok(())
    }
}

/// Posterior-mean colour differences over a pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingMap {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    pub times: Vec<f64>,
    /// `M×T`.
    pub mean: DMatrix<f64>,
    /// `M×T`, `mean > threshold`.
    pub perceptible: DMatrix<bool>,
    pub threshold: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, posterior: &PosteriorDraws) -> Result<Predictor<'a>> {
        if posterior.total_draws() == 0 {
            return Err(Error::Dimension(
                "no posterior draws to predict from".into(),
            ));
        }
        if posterior.dim() != model.layout.dim() {
            return Err(Error::Dimension(format!(
                "draws have {} parameters but the model expects {}",
                posterior.dim(),
                model.layout.dim()
            )));
        }
        let draws = posterior
            .iter_draws()
            .map(|values| {
                let state = model.state_from_values(values);
                state.hyper.validate()?;
                let cov = CovMatrix::factorize(model.correlation(&state.hyper.rho))?;
                let mut a = DMatrix::zeros(state.b.nrows(), state.b.ncols());
                for k in 0..state.b.nrows() {
                    let bk =
                        DVector::from_iterator(state.b.ncols(), state.b.row(k).iter().copied());
                    a.row_mut(k).copy_from(&cov.solve(&bk).transpose());
                }
                Ok(PreparedDraw {
                    b: state.b,
                    a,
                    hyper: state.hyper,
                    cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // New locations always get the exact constraints.
        let mode = if model.constraints.saturation {
            SeriesMode::Saturated
        } else {
            SeriesMode::AnchorOnly
        };
        Ok(Predictor {
            model,
            design: SeriesDesign::new(&model.basis, mode),
            draws,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    fn curve(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t_len = self.design.t;
        let f = (0..t_len)
            .map(|t| dot(self.design.g_row(t), theta))
            .collect();
        let fp = (0..t_len)
            .map(|t| dot(self.design.d_row(t), theta))
            .collect();
        (f, fp)
    }

    /// Draws the predictive series at standardized input `xstar`.
    pub fn predict_location(
        &self,
        xstar: &[f64; INPUT_DIM],
        cfg: &PredictConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictiveSeries> {
        let model = self.model;
        let k_len = model.n_knots();
        let t_len = model.n_times();
        let p = self.design.p;
        let xs = DMatrix::from_row_slice(1, INPUT_DIM, xstar);
        let dist = SqDistances::between(&xs, model.inputs());
        let one = DMatrix::from_element(1, 1, 1.0);
        let screen = model.config.monotonicity;
        let beta_scale = model.config.priors.beta_scale;

        let mut y_rows = Vec::new();
        let mut f_rows = Vec::new();
        let mut fp_rows = Vec::new();
        let mut b_rows = Vec::new();
        let mut sigmas = Vec::new();
        let mut rejected = 0usize;
        for d in &self.draws {
            let cstar = dist.correlation(&d.hyper.rho);
            let mut cond = Vec::with_capacity(k_len);
            for k in 0..k_len {
                let bk = DVector::from_iterator(d.b.ncols(), d.b.row(k).iter().copied());
                let (m, v) = gp_conditional(&d.cov, &cstar, &one, &bk, d.hyper.alpha_for(k))?;
                cond.push((m[0], v[(0, 0)].sqrt()));
            }
            let mut accepted = None;
            for _ in 0..cfg.max_attempts.max(1) {
                let mut theta = vec![0.0; p];
                for (k, &(m, s)) in cond.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    theta[k] = m + s * z;
                }
                for th in theta.iter_mut().skip(k_len) {
                    let z: f64 = StandardNormal.sample(rng);
                    *th = beta_scale * z;
                }
                let (f, fp) = self.curve(&theta);
                if screen && fp.iter().any(|&v| v < -cfg.monotone_tol) {
                    continue;
                }
                accepted = Some((theta, f, fp));
                break;
            }
            let Some((theta, f, fp)) = accepted else {
                rejected += 1;
                continue;
            };
            let sigma = d.hyper.sigma;
            let y: Vec<f64> = (0..t_len)
                .map(|t| {
                    if t == 0 {
                        0.0
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        f[t] + sigma * z
                    }
                })
                .collect();
            y_rows.push(y);
            f_rows.push(f);
            fp_rows.push(fp);
            b_rows.push(theta[..k_len].to_vec());
            sigmas.push(sigma);
        }
        if y_rows.is_empty() {
            return Err(Error::EmptyPredictive);
        }
        let to_matrix =
            |rows: &[Vec<f64>], cols: usize| DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]);
        let draws = to_matrix(&y_rows, t_len);
        let latent = to_matrix(&f_rows, t_len);
        let s = draws.nrows() as f64;
        let mut mean = vec![0.0; t_len];
        let mut lower95 = vec![0.0; t_len];
        let mut upper95 = vec![0.0; t_len];
        let mut latent_mean = vec![0.0; t_len];
        let mut latent_mcse = vec![0.0; t_len];
        for t in 0..t_len {
            let mut col: Vec<f64> = draws.column(t).iter().copied().collect();
            mean[t] = col.iter().sum::<f64>() / s;
            col.sort_by(f64::total_cmp);
            lower95[t] = quantile_sorted(&col, 0.025);
            upper95[t] = quantile_sorted(&col, 0.975);
            let lm = latent.column(t).sum() / s;
            latent_mean[t] = lm;
            if s > 1.0 {
                let var = latent
                    .column(t)
                    .iter()
                    .map(|v| (v - lm) * (v - lm))
                    .sum::<f64>()
                    / (s - 1.0);
                latent_mcse[t] = (var / s).sqrt();
            }
        }
        Ok(PredictiveSeries {
            xstar: *xstar,
            derivative: to_matrix(&fp_rows, t_len),
            b_star: to_matrix(&b_rows, k_len),
            draws,
            latent,
            sigma: sigmas,
            mean,
            lower95,
            upper95,
            latent_mean,
            latent_mcse,
            rejection_rate: rejected as f64 / self.draws.len() as f64,
        })
    }

    /// Posterior-mean curves at the standardized pixel inputs `x_std`
    /// (`M×5`, same order as `grid`), processed in blocks.
    pub fn fading_map(
        &self,
        x_std: &DMatrix<f64>,
        grid: &PixelGrid,
        cfg: &PredictConfig,
    ) -> Result<FadingMap> {
        if x_std.nrows() != grid.len() || x_std.ncols() != INPUT_DIM {
            return Err(Error::Dimension(
                "pixel inputs do not match the grid".into(),
            ));
        }
        let model = self.model;
        let k_len = model.n_knots();
        let t_len = model.n_times();
        let m = grid.len();
        let block = cfg.block_size.max(1);
        let starts: Vec<usize> = (0..m).step_by(block).collect();
        let blocks: Vec<DMatrix<f64>> = starts
            .par_iter()
            .map(|&r0| {
                let r1 = (r0 + block).min(m);
                let xb = x_std.rows(r0, r1 - r0).into_owned();
                let dist = SqDistances::between(&xb, model.inputs());
                let mut acc = DMatrix::zeros(r1 - r0, k_len);
                for d in &self.draws {
                    acc += dist.correlation(&d.hyper.rho) * d.a.transpose();
                }
                acc /= self.draws.len() as f64;
                // Free linear coefficients have prior mean zero.
                DMatrix::from_fn(r1 - r0, t_len, |r, t| {
                    let g = self.design.g_row(t);
                    (0..k_len).map(|k| g[k] * acc[(r, k)]).sum::<f64>()
                })
            })
            .collect();
        let mut mean = DMatrix::zeros(m, t_len);
        for (&r0, b) in starts.iter().zip(&blocks) {
            mean.rows_mut(r0, b.nrows()).copy_from(b);
        }
        let threshold = cfg.perceptible_threshold;
        Ok(FadingMap {
            px: grid.px.clone(),
            py: grid.py.clone(),
            times: model.basis.times.clone(),
            perceptible: mean.map(|v| perceptible(v, threshold)),
            mean,
            threshold,
        })
    }
}

impl FadingMap {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "px,py,t,mean,perceptible")?;
        for i in 0..self.px.len() {
            for (t, tv) in self.times.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt17(self.px[i]),
                    fmt17(self.py[i]),
                    fmt17(*tv),
                    fmt17(self.mean[(i, t)]),
                    u8::from(self.perceptible[(i, t)])
                )?;
            }
        }
        Ok(())
    }

    /// Upper end of the gray ramp: `gray_max` if positive, else the map maximum.
    pub fn gray_scale(&self, gray_max: f64) -> f64 {
        if gray_max > 0.0 {
            return gray_max;
        }
        let top = self.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > 0.0 {
            top
        } else {
            1.0
        }
    }

    /// Plain (P2) graymap of time index `t` (0-based). Columns follow the
    /// distinct `px` values in ascending order and rows the distinct `py`
    /// values from the top.
    pub fn write_pgm(&self, t: usize, gray_max: f64, w: &mut impl Write) -> std::io::Result<()> {
        let distinct = |v: &[f64]| {
            let mut u = v.to_vec();
            u.sort_by(f64::total_cmp);
            u.dedup();
            u
        };
        let xs = distinct(&self.px);
        let ys = distinct(&self.py);
        let scale = self.gray_scale(gray_max);
        let mut img = vec![0u8; xs.len() * ys.len()];
        for i in 0..self.px.len() {
            let c = xs.partition_point(|&x| x < self.px[i]);
            let r = ys.partition_point(|&y| y < self.py[i]);
            let g = (255.0 * (self.mean[(i, t)] / scale).clamp(0.0, 1.0)).round();
            img[r * xs.len() + c] = g as u8;
        }
        writeln!(w, "P2")?;
        writeln!(w, "# fading map at t = {}", fmt17(self.times[t]))?;
        writeln!(
            w,
            "# gray = round(255 * clamp(dE / {}, 0, 1)), dE the posterior mean",
            fmt17(scale)
        )?;
        writeln!(
            w,
            "# columns: px ascending; rows: py ascending from the top; missing pixels are 0"
        )?;
        writeln!(w, "{} {}", xs.len(), ys.len())?;
        writeln!(w, "255")?;
        for row in img.chunks(xs.len()) {
            // Plain graymap lines should stay within 70 characters.
            let mut line = String::new();
            for v in row {
                let s = v.to_string();
                if !line.is_empty() && line.len() + 1 + s.len() > 70 {
                    writeln!(w, "{line}")?;
                    line.clear();
                }
                if !line.is_empty() {
                    line.push(' ');
                }
                line.push_str(&s);
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{standardize_inputs, StandardizeOptions};
    use crate::evaluate::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::model::LatentState;
    use crate::sampler::ChainDraws;
    use rand::SeedableRng;

    struct Fixture {
        model: Model,
        truth_b: DMatrix<f64>,
        hyper: Hyperparams,
    }

    fn fixture(n: usize, knots: usize, config: ModelConfig) -> Fixture {
        let spec = SyntheticSpec {
            n,
            times: (1..=6).map(f64::from).collect(),
            knots,
            seed: 5,
            ..Default::default()
        };
        let (ds, truth) = generate_synthetic(&spec).unwrap();
        let x = standardize_inputs(&ds.x_raw, StandardizeOptions::default())
            .unwrap()
            .x;
        let config = ModelConfig { knots, ..config };
        let model = Model::new(&ds.y, &x, &ds.times, &config).unwrap();
        let truth_b = DMatrix::from_fn(knots, n, |k, i| truth.b[k][i]);
        Fixture {
            model,
            truth_b,
            hyper: truth.hyper,
        }
    }

    fn posterior(model: &Model, states: &[LatentState]) -> PosteriorDraws {
        let draws: Vec<Vec<f64>> = states
            .iter()
            .map(|s| model.to_natural(&model.pack(s).unwrap()))
            .collect();
        PosteriorDraws {
            names: model.layout.names(),
            chains: vec![ChainDraws {
                lp: vec![0.0; draws.len()],
                draws,
                stats: Vec::new(),
                step_size: 0.1,
                inv_metric: Vec::new(),
                warmup_leapfrogs: 0,
            }],
        }
    }

    fn state(f: &Fixture, b: DMatrix<f64>, sigma: f64) -> LatentState {
        let n = b.ncols();
        LatentState {
            b,
            extras: DMatrix::zeros(f.model.layout.extras, n),
            hyper: Hyperparams {
                sigma,
                ..f.hyper.clone()
            },
        }
    }

    #[test]
    fn observed_location_reproduces_fitted_curve() {
        let f = fixture(5, 3, ModelConfig::default());
        let states: Vec<LatentState> = (0..200)
            .map(|s| state(&f, f.truth_b.clone(), 0.2 + 0.001 * s as f64))
            .collect();
        let post = posterior(&f.model, &states);
        let pred = Predictor::new(&f.model, &post).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xstar: [f64; 5] = std::array::from_fn(|d| f.model.inputs()[(2, d)]);
        let series = pred
            .predict_location(&xstar, &PredictConfig::default(), &mut rng)
            .unwrap();
        let (curve, _) = f.model.curves(&states[0]);
        for t in 0..6 {
            assert!(
                (series.latent_mean[t] - curve[(t, 2)]).abs() < 1e-3,
                "t={t}"
            );
            assert!(series.lower95[t] <= series.mean[t] && series.mean[t] <= series.upper95[t]);
        }
        assert_eq!(series.mean[0], 0.0);
        assert_eq!(series.rejection_rate, 0.0);
    }

    #[test]
    fn distant_input_keeps_constraints_exact() {
        let f = fixture(5, 3, ModelConfig::default());
        let states: Vec<LatentState> = (0..100)
            .map(|_| state(&f, f.truth_b.clone(), 0.3))
            .collect();
        let post = posterior(&f.model, &states);
        let pred = Predictor::new(&f.model, &post).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = pred
            .predict_location(&[1e6; 5], &PredictConfig::default(), &mut rng)
            .unwrap();
        for r in 0..s.n_retained() {
            assert!(s.latent[(r, 0)].abs() < 1e-10);
            assert!(s.derivative[(r, 5)].abs() < 1e-10);
            assert!(s.derivative.row(r).iter().all(|&d| d >= -1e-6));
            assert_eq!(s.draws[(r, 0)], 0.0);
            for t in 0..5 {
                assert!(s.latent[(r, t + 1)] >= s.latent[(r, t)] - 1e-6);
            }
        }
        // Far away the draws follow the prior, so some are screened out.
        assert!(s.rejection_rate >= 0.0 && s.rejection_rate < 1.0);
    }

    #[test]
    fn single_knot_matches_joint_gaussian_conditioning() {
        let cfg = ModelConfig {
            monotonicity: false,
            ..Default::default()
        };
        let f = fixture(3, 1, cfg);
        let x = f.model.inputs().clone();
        let rho = f.hyper.rho;
        let alpha = f.hyper.alpha[0];
        let cov = CovMatrix::factorize(f.model.correlation(&rho)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<LatentState> = (0..400)
            .map(|_| {
                let z = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                let b = DMatrix::from_row_slice(1, 3, (&cov.chol * z * alpha.sqrt()).as_slice());
                state(&f, b, 0.3)
            })
            .collect();
        let post = posterior(&f.model, &states);
        let pred = Predictor::new(&f.model, &post).unwrap();
        let xstar = [
            x[(0, 0)] + 0.3,
            x[(1, 1)] - 0.2,
            x[(2, 2)],
            x[(0, 3)] + 0.5,
            x[(1, 4)],
        ];

        // Oracle: partition the joint 4×4 correlation directly.
        let mut all = DMatrix::zeros(4, 5);
        all.rows_mut(0, 3).copy_from(&x);
        all.row_mut(3)
            .copy_from(&DMatrix::from_row_slice(1, 5, &xstar));
        let joint = SqDistances::between(&all, &all).correlation(&rho);
        let c11 = joint.view((0, 0), (3, 3)).into_owned();
        let c21 = joint.view((3, 0), (1, 3)).into_owned();
        let weights = c21 * c11.try_inverse().unwrap();
        let oracle = states
            .iter()
            .map(|s| (&weights * s.b.row(0).transpose())[0])
            .sum::<f64>()
            / 400.0;

        let s = pred
            .predict_location(&xstar, &PredictConfig::default(), &mut rng)
            .unwrap();
        let bs = s.b_star.column(0);
        let m = bs.mean();
        let sd = (bs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 399.0).sqrt();
        assert!((m - oracle).abs() < 2.0 * sd / 20.0, "{m} vs {oracle}");
    }

    #[test]
    fn all_rejected_is_empty_predictive() {
        let f = fixture(3, 1, ModelConfig::default());
        // A single-knot coefficient of the wrong sign makes every curve decreasing.
        let b = -5.0 * f.model.design.d_row(0)[0].signum();
        let states = vec![state(&f, DMatrix::from_element(1, 3, b), 0.3); 3];
        let post = posterior(&f.model, &states);
        let pred = Predictor::new(&f.model, &post).unwrap();
        let xstar: [f64; 5] = std::array::from_fn(|d| f.model.inputs()[(0, d)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            pred.predict_location(&xstar, &PredictConfig::default(), &mut rng),
            Err(Error::EmptyPredictive)
        ));
    }

    #[test]
    fn identical_pixels_give_constant_map() {
        let f = fixture(5, 3, ModelConfig::default());
        let states: Vec<LatentState> = (0..20).map(|_| state(&f, f.truth_b.clone(), 0.3)).collect();
        let post = posterior(&f.model, &states);
        let pred = Predictor::new(&f.model, &post).unwrap();
        let rows: Vec<[f64; 5]> = (0..7).map(|_| [1.0, 2.0, 100.0, 80.0, 60.0]).collect();
        let grid = PixelGrid::from_rows(&rows);
        let x = DMatrix::from_fn(7, 5, |_, d| f.model.inputs()[(1, d)]);
        let cfg = PredictConfig {
            block_size: 3,
            ..Default::default()
        };
        let map = pred.fading_map(&x, &grid, &cfg).unwrap();
        for i in 1..7 {
            assert_eq!(map.mean.row(i), map.mean.row(0));
        }
        let (curve, _) = f.model.curves(&states[0]);
        for t in 0..6 {
            assert!((map.mean[(0, t)] - curve[(t, 1)]).abs() < 1e-3);
        }
    }

    #[test]
    fn perceptibility_threshold() {
        assert!(perceptible(3.6, PERCEPTIBLE_DELTA_E));
        assert!(!perceptible(3.4, PERCEPTIBLE_DELTA_E));
        assert!(!perceptible(3.5, PERCEPTIBLE_DELTA_E));
    }

    #[test]
    fn graymap_layout_and_ramp() {
        let map = FadingMap {
            px: vec![0.0, 1.0, 0.0, 1.0],
            py: vec![0.0, 0.0, 1.0, 1.0],
            times: vec![1.0, 2.0],
            mean: DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 2.0, 0.0, 4.0, 0.0, 8.0]),
            perceptible: DMatrix::from_element(4, 2, false),
            threshold: 3.5,
        };
        let mut out = Vec::new();
        map.write_pgm(1, 0.0, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec!["P2", "2 2", "255", "0 64", "128 255"]);
    }
}
