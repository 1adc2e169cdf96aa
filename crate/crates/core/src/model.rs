//! Constrained joint log-posterior and its analytic gradient.
//!
//! With exact constraints the two linear coefficients of every series are
//! eliminated: `β₂ = −W′[T]·b` forces `f′(T) = 0` and
//! `β₁ = −β₂·t₁ − W[1]·b` forces `f(t₁) = 0`. Each series is then a linear
//! map of its remaining coefficients `θ`, `f = G·θ` and `f′ = D·θ`, and the
//! sampler runs over `b` and log-transformed hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::basis::{make_knots, SplineBasis};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernel::{CovMatrix, Hyperparams, SqDistances, N_LENGTHSCALES};
use crate::numeric::{d_log_ndtr, log_ndtr, HALF_LN_2PI};
use crate::sampler::LogDensity;

/// Which observations enter the likelihood and how the shape constraints act.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintConfig {
    /// Exact zero at the first time point (set A).
    pub anchor: bool,
    /// Exact zero derivative at the last time point (set B).
    pub saturation: bool,
    /// Derivative-sign observations (set C), indexed `i*T + t`.
    pub monotone: Vec<bool>,
    pub v: f64,
}

impl ConstraintConfig {
    pub fn new(config: &ModelConfig, n: usize, t: usize) -> ConstraintConfig {
        ConstraintConfig {
            anchor: true,
            saturation: config.saturation,
            monotone: vec![config.monotonicity; n * t],
            v: config.v,
        }
    }

    pub fn has_monotonicity(&self) -> bool {
        self.monotone.iter().any(|&m| m)
    }
}

/// How the per-series parameter vector `θ` is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesMode {
    /// `θ = b`; both linear coefficients eliminated.
    Saturated,
    /// `θ = (b, β₂)`; only the anchor is exact.
    AnchorOnly,
    /// `θ = (b, β₁, β₂)`; constraints enter as narrow Gaussians.
    Soft,
}

impl SeriesMode {
    pub fn extras(self) -> usize {
        match self {
            SeriesMode::Saturated => 0,
            SeriesMode::AnchorOnly => 1,
            SeriesMode::Soft => 2,
        }
    }
}

/// Dense `T×P` designs mapping `θ` to function values and derivatives.
#[derive(Debug, Clone)]
pub struct SeriesDesign {
    pub mode: SeriesMode,
    pub t: usize,
    pub p: usize,
    /// Row-major `T×P`.
    pub g: Vec<f64>,
    pub d: Vec<f64>,
}

impl SeriesDesign {
    pub fn new(basis: &SplineBasis, mode: SeriesMode) -> SeriesDesign {
        let t_len = basis.n_times();
        let k = basis.n_knots();
        let p = k + mode.extras();
        let t1 = basis.times[0];
        let last = t_len - 1;
        let mut g = vec![0.0; t_len * p];
        let mut d = vec![0.0; t_len * p];
        for t in 0..t_len {
            let tv = basis.times[t];
            for c in 0..k {
                let (gv, dv) = match mode {
                    SeriesMode::Saturated => (
                        basis.w[(t, c)] - basis.w[(0, c)] - (tv - t1) * basis.dw[(last, c)],
                        basis.dw[(t, c)] - basis.dw[(last, c)],
                    ),
                    SeriesMode::AnchorOnly => (basis.w[(t, c)] - basis.w[(0, c)], basis.dw[(t, c)]),
                    SeriesMode::Soft => (basis.w[(t, c)], basis.dw[(t, c)]),
                };
                g[t * p + c] = gv;
                d[t * p + c] = dv;
            }
            match mode {
                SeriesMode::Saturated => {}
                SeriesMode::AnchorOnly => {
                    g[t * p + k] = tv - t1;
                    d[t * p + k] = 1.0;
                }
                SeriesMode::Soft => {
                    g[t * p + k] = 1.0;
                    g[t * p + k + 1] = tv;
                    d[t * p + k + 1] = 1.0;
                }
            }
        }
        SeriesDesign {
            mode,
            t: t_len,
            p,
            g,
            d,
        }
    }

    #[inline]
    pub fn g_row(&self, t: usize) -> &[f64] {
        &self.g[t * self.p..(t + 1) * self.p]
    }

    #[inline]
    pub fn d_row(&self, t: usize) -> &[f64] {
        &self.d[t * self.p..(t + 1) * self.p]
    }
}

/// Linear coefficients implied by the exact constraints, `2×N`.
pub fn eliminate_constraints(b: &DMatrix<f64>, basis: &SplineBasis) -> DMatrix<f64> {
    let n = b.ncols();
    let last = basis.n_times() - 1;
    let t1 = basis.times[0];
    DMatrix::from_fn(2, n, |r, i| {
        let slope = -(0..b.nrows())
            .map(|k| basis.dw[(last, k)] * b[(k, i)])
            .sum::<f64>();
        if r == 1 {
            slope
        } else {
            -slope * t1
                - (0..b.nrows())
                    .map(|k| basis.w[(0, k)] * b[(k, i)])
                    .sum::<f64>()
        }
    })
}

/// Full latent state in natural (constrained) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `K×N` spline coefficients.
    pub b: DMatrix<f64>,
    /// `E×N` free linear coefficients (empty when both are eliminated).
    pub extras: DMatrix<f64>,
    pub hyper: Hyperparams,
}

/// Positions of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub k: usize,
    pub n: usize,
    pub extras: usize,
    pub n_alpha: usize,
    pub alpha_free: bool,
    pub rho_free: bool,
    pub sigma_free: bool,
}

impl ParamLayout {
    pub fn n_b(&self) -> usize {
        self.k * self.n
    }

    pub fn extras_offset(&self) -> usize {
        self.n_b()
    }

    pub fn alpha_offset(&self) -> usize {
        self.n_b() + self.extras * self.n
    }

    pub fn rho_offset(&self) -> usize {
        self.alpha_offset() + if self.alpha_free { self.n_alpha } else { 0 }
    }

    pub fn sigma_offset(&self) -> usize {
        self.rho_offset() + if self.rho_free { N_LENGTHSCALES } else { 0 }
    }

    pub fn dim(&self) -> usize {
        self.sigma_offset() + usize::from(self.sigma_free)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for k in 0..self.k {
            for i in 0..self.n {
                names.push(format!("b[{},{}]", k + 1, i + 1));
            }
        }
        for i in 0..self.n {
            match self.extras {
                1 => names.push(format!("beta2[{}]", i + 1)),
                2 => {
                    names.push(format!("beta1[{}]", i + 1));
                    names.push(format!("beta2[{}]", i + 1));
                }
                _ => {}
            }
        }
        if self.alpha_free {
            if self.n_alpha == 1 {
                names.push("alpha".into());
            } else {
                names.extend((1..=self.n_alpha).map(|k| format!("alpha[{k}]")));
            }
        }
        if self.rho_free {
            names.extend((1..=N_LENGTHSCALES).map(|d| format!("rho[{d}]")));
        }
        if self.sigma_free {
            names.push("sigma".into());
        }
        names
    }
}

/// The posterior for one dataset and one model configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub basis: SplineBasis,
    pub design: SeriesDesign,
    pub constraints: ConstraintConfig,
    pub layout: ParamLayout,
    n: usize,
    t: usize,
    /// Observations indexed `i*T + t`.
    y: Vec<f64>,
    observed: Vec<bool>,
    dist: SqDistances,
    /// `N×5` standardized training inputs.
    x: DMatrix<f64>,
    /// Orthogonal `K×K` map from knot coordinates to sampler coordinates.
    rotation: DMatrix<f64>,
    /// Rotated rows outside the reach of the likelihood, sampled as
    /// `u_j = √α·L·η_j`.
    noncentered: Vec<bool>,
}

impl Model {
    /// `y` is `T×N`, `x` the `N×5` standardized inputs.
    pub fn new(
        y: &DMatrix<f64>,
        x: &DMatrix<f64>,
        times: &[f64],
        config: &ModelConfig,
    ) -> Result<Model> {
        config.validate()?;
        let (t, n) = y.shape();
        if x.nrows() != n {
            return Err(Error::Dimension(
                "inputs and observations disagree on N".into(),
            ));
        }
        if times.len() != t {
            return Err(Error::Dimension(
                "times and observations disagree on T".into(),
            ));
        }
        let knots = make_knots(times, config.knots)?;
        let basis = SplineBasis::with_penalty_power(times, &knots, config.penalty_power)?;
        let mode = if config.soft_constraints {
            SeriesMode::Soft
        } else if config.saturation {
            SeriesMode::Saturated
        } else {
            SeriesMode::AnchorOnly
        };
        let design = SeriesDesign::new(&basis, mode);
        let (rotation, noncentered) = if config.per_knot_alpha {
            (
                DMatrix::identity(config.knots, config.knots),
                vec![false; config.knots],
            )
        } else {
            principal_axes(&design, config.knots)
        };
        let n_alpha = if config.per_knot_alpha {
            config.knots
        } else {
            1
        };
        let layout = ParamLayout {
            k: config.knots,
            n,
            extras: mode.extras(),
            n_alpha,
            alpha_free: config.fixed.alpha.is_none(),
            rho_free: config.fixed.rho.is_none(),
            sigma_free: config.fixed.sigma.is_none(),
        };
        let mut yv = vec![0.0; n * t];
        for i in 0..n {
            for tt in 0..t {
                yv[i * t + tt] = y[(tt, i)];
            }
        }
        Ok(Model {
            config: config.clone(),
            constraints: ConstraintConfig::new(config, n, t),
            basis,
            design,
            layout,
            n,
            t,
            y: yv,
            observed: vec![true; n * t],
            dist: SqDistances::within(x),
            x: x.clone(),
            rotation,
            noncentered,
        })
    }

    /// Excludes observation `(t, i)` from the likelihood.
    pub fn hold_out(&mut self, t: usize, i: usize) {
        self.observed[i * self.t + t] = false;
    }

    /// Replaces the derivative-sign set.
    pub fn set_monotone_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n * self.t {
            return Err(Error::Dimension(
                "monotonicity mask must have N·T entries".into(),
            ));
        }
        self.constraints.monotone = mask;
        Ok(())
    }

    pub fn n_locations(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.t
    }

    pub fn n_knots(&self) -> usize {
        self.layout.k
    }

    /// Standardized training inputs, `N×5`.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn correlation(&self, rho: &[f64; N_LENGTHSCALES]) -> DMatrix<f64> {
        self.dist.correlation(rho)
    }

    fn fixed_or(
        &self,
        free: bool,
        value: impl FnOnce() -> Vec<f64>,
        fixed: impl FnOnce() -> Vec<f64>,
    ) -> Vec<f64> {
        if free {
            value()
        } else {
            fixed()
        }
    }

    /// Rows of the rotated coefficient block that are sampled non-centred.
    pub fn noncentered_rows(&self) -> &[bool] {
        &self.noncentered
    }

    fn hyper_from(&self, x: &[f64]) -> Hyperparams {
        let l = &self.layout;
        let alpha = self.fixed_or(
            l.alpha_free,
            || {
                x[l.alpha_offset()..l.alpha_offset() + l.n_alpha]
                    .iter()
                    .map(|v| v.exp())
                    .collect()
            },
            || self.config.fixed.alpha.clone().expect("fixed alpha"),
        );
        let rho: [f64; N_LENGTHSCALES] = if l.rho_free {
            std::array::from_fn(|d| x[l.rho_offset() + d].exp())
        } else {
            self.config.fixed.rho.expect("fixed rho")
        };
        let sigma = if l.sigma_free {
            x[l.sigma_offset()].exp()
        } else {
            self.config.fixed.sigma.expect("fixed sigma")
        };
        Hyperparams { alpha, rho, sigma }
    }

    fn any_noncentered(&self) -> bool {
        self.noncentered.iter().any(|&c| c)
    }

    fn factor_if_needed(&self, h: &Hyperparams) -> Result<Option<CovMatrix>> {
        if self.any_noncentered() {
            Ok(Some(CovMatrix::factorize(self.dist.correlation(&h.rho))?))
        } else {
            Ok(None)
        }
    }

    /// Rotated rows `u` (row-major `j*N + i`) from sampler coordinates.
    fn rows_from_sampler(&self, x: &[f64], alpha: f64, cov: Option<&CovMatrix>) -> Vec<f64> {
        let n = self.n;
        let mut u = x[..self.layout.n_b()].to_vec();
        if let Some(cov) = cov {
            let sa = alpha.sqrt();
            for (j, _) in self.noncentered.iter().enumerate().filter(|(_, &c)| c) {
                let eta = &x[j * n..(j + 1) * n];
                for r in 0..n {
                    u[j * n + r] = sa * (0..=r).map(|c| cov.chol[(r, c)] * eta[c]).sum::<f64>();
                }
            }
        }
        u
    }

    /// `b_i = Rᵀ·u_i` (or `u_i = R·b_i` when `forward`), per series.
    fn rotate(&self, v: &[f64], forward: bool) -> Vec<f64> {
        let (k_len, n) = (self.layout.k, self.n);
        let mut out = vec![0.0; k_len * n];
        for i in 0..n {
            for j in 0..k_len {
                out[j * n + i] = (0..k_len)
                    .map(|k| {
                        let r = if forward {
                            self.rotation[(j, k)]
                        } else {
                            self.rotation[(k, j)]
                        };
                        r * v[k * n + i]
                    })
                    .sum();
            }
        }
        out
    }

    /// Unconstrained sampler coordinates to the natural vector (natural `b`,
    /// log-hyperparameters).
    fn sampler_to_natural(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.hyper_from(x);
        let cov = self.factor_if_needed(&h)?;
        let u = self.rows_from_sampler(x, h.alpha[0], cov.as_ref());
        let mut out = x.to_vec();
        out[..self.layout.n_b()].copy_from_slice(&self.rotate(&u, false));
        Ok(out)
    }

    fn natural_to_sampler(&self, xn: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let h = self.hyper_from(xn);
        let cov = self.factor_if_needed(&h)?;
        let mut u = self.rotate(&xn[..self.layout.n_b()], true);
        if let Some(cov) = cov {
            let sa = h.alpha[0].sqrt();
            for (j, _) in self.noncentered.iter().enumerate().filter(|(_, &c)| c) {
                let row = DVector::from_column_slice(&u[j * n..(j + 1) * n]);
                let eta = cov
                    .chol
                    .solve_lower_triangular(&row)
                    .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                for r in 0..n {
                    u[j * n + r] = eta[r] / sa;
                }
            }
        }
        let mut out = xn.to_vec();
        out[..self.layout.n_b()].copy_from_slice(&u);
        Ok(out)
    }

    /// Diagonal inverse metric before any adaptation: coordinates the
    /// observations pin down tightly start with variance `1/gᵢᵢ`, where `g`
    /// is the value-design gram in sampler coordinates, capped at 1.
    pub fn metric_guess(&self) -> Vec<f64> {
        let l = &self.layout;
        let p = self.design.p;
        let col = |t: usize, c: usize| -> f64 {
            if c < l.k {
                (0..l.k)
                    .map(|k| self.rotation[(c, k)] * self.design.g_row(t)[k])
                    .sum()
            } else {
                self.design.g_row(t)[c]
            }
        };
        let var: Vec<f64> = (0..p)
            .map(|c| {
                let g: f64 = (1..self.t).map(|t| col(t, c).powi(2)).sum();
                if c < l.k && self.noncentered[c] || !(g > 1.0) {
                    1.0
                } else {
                    1.0 / g
                }
            })
            .collect();
        let mut out = vec![1.0; l.dim()];
        for j in 0..l.k {
            out[j * l.n..(j + 1) * l.n]
                .iter_mut()
                .for_each(|v| *v = var[j]);
        }
        for i in 0..l.n {
            for e in 0..l.extras {
                out[l.extras_offset() + i * l.extras + e] = var[l.k + e];
            }
        }
        out
    }

    /// Maps an unconstrained vector to the natural-scale state.
    pub fn unpack(&self, x: &[f64]) -> Result<LatentState> {
        Ok(self.unpack_natural(&self.sampler_to_natural(x)?))
    }

    fn unpack_natural(&self, x: &[f64]) -> LatentState {
        let l = &self.layout;
        let b = DMatrix::from_fn(l.k, l.n, |k, i| x[k * l.n + i]);
        let extras = DMatrix::from_fn(l.extras, l.n, |j, i| {
            x[l.extras_offset() + i * l.extras + j]
        });
        LatentState {
            b,
            extras,
            hyper: self.hyper_from(x),
        }
    }

    fn pack_natural(&self, state: &LatentState) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.dim()];
        for k in 0..l.k {
            for i in 0..l.n {
                x[k * l.n + i] = state.b[(k, i)];
            }
        }
        for i in 0..l.n {
            for j in 0..l.extras {
                x[l.extras_offset() + i * l.extras + j] = state.extras[(j, i)];
            }
        }
        if l.alpha_free {
            for (a, v) in state.hyper.alpha.iter().enumerate() {
                x[l.alpha_offset() + a] = v.ln();
            }
        }
        if l.rho_free {
            for d in 0..N_LENGTHSCALES {
                x[l.rho_offset() + d] = state.hyper.rho[d].ln();
            }
        }
        if l.sigma_free {
            x[l.sigma_offset()] = state.hyper.sigma.ln();
        }
        x
    }

    pub fn pack(&self, state: &LatentState) -> Result<Vec<f64>> {
        self.natural_to_sampler(&self.pack_natural(state))
    }

    /// Natural-scale values in the order of [`ParamLayout::names`]; NaN if
    /// the point cannot be mapped.
    pub fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        match self.sampler_to_natural(x) {
            Ok(mut out) => {
                for v in &mut out[self.layout.alpha_offset()..] {
                    *v = v.exp();
                }
                out
            }
            Err(_) => vec![f64::NAN; x.len()],
        }
    }

    pub fn from_natural(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut out = values.to_vec();
        for v in &mut out[self.layout.alpha_offset()..] {
            *v = v.ln();
        }
        self.natural_to_sampler(&out)
    }

    /// State from a reported draw (values in [`ParamLayout::names`] order).
    pub fn state_from_values(&self, values: &[f64]) -> LatentState {
        let mut x = values.to_vec();
        for v in &mut x[self.layout.alpha_offset()..] {
            *v = v.ln();
        }
        self.unpack_natural(&x)
    }

    fn theta(&self, state: &LatentState, i: usize) -> Vec<f64> {
        let mut th = Vec::with_capacity(self.design.p);
        th.extend(state.b.column(i).iter());
        th.extend(state.extras.column(i).iter());
        th
    }

    /// Linear coefficients `2×N` for a state, eliminated or free.
    pub fn beta(&self, state: &LatentState) -> DMatrix<f64> {
        match self.design.mode {
            SeriesMode::Saturated => eliminate_constraints(&state.b, &self.basis),
            SeriesMode::AnchorOnly => {
                let t1 = self.basis.times[0];
                DMatrix::from_fn(2, self.n, |r, i| {
                    let b2 = state.extras[(0, i)];
                    if r == 1 {
                        b2
                    } else {
                        -b2 * t1
                            - (0..self.layout.k)
                                .map(|k| self.basis.w[(0, k)] * state.b[(k, i)])
                                .sum::<f64>()
                    }
                })
            }
            SeriesMode::Soft => state.extras.clone(),
        }
    }

    /// Function values and time derivatives, both `T×N`.
    pub fn curves(&self, state: &LatentState) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut f = DMatrix::zeros(self.t, self.n);
        let mut fp = DMatrix::zeros(self.t, self.n);
        for i in 0..self.n {
            let th = self.theta(state, i);
            for t in 0..self.t {
                f[(t, i)] = dot(self.design.g_row(t), &th);
                fp[(t, i)] = dot(self.design.d_row(t), &th);
            }
        }
        (f, fp)
    }

    /// Curves for a single coefficient column (used by prediction).
    pub fn curve_for(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let f = (0..self.t)
            .map(|t| dot(self.design.g_row(t), theta))
            .collect();
        let fp = (0..self.t)
            .map(|t| dot(self.design.d_row(t), theta))
            .collect();
        (f, fp)
    }

    /// Gaussian terms for noisy observations plus probit terms for derivative
    /// signs. Observations at the first time point are exact and excluded.
    pub fn log_likelihood(&self, state: &LatentState) -> Result<f64> {
        let sigma = state.hyper.sigma;
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let (f, fp) = self.curves(state);
        let v = self.constraints.v;
        let mut lp = 0.0;
        for i in 0..self.n {
            for t in 0..self.t {
                let idx = i * self.t + t;
                if t > 0 && self.observed[idx] {
                    let r = self.y[idx] - f[(t, i)];
                    lp += -HALF_LN_2PI - sigma.ln() - 0.5 * r * r / (sigma * sigma);
                }
                if self.constraints.monotone[idx] {
                    lp += log_ndtr(fp[(t, i)] / v);
                }
            }
        }
        if self.design.mode == SeriesMode::Soft {
            let eps = self.config.sigma_eps;
            for i in 0..self.n {
                lp += normal_lpdf(f[(0, i)], eps);
                if self.constraints.saturation {
                    lp += normal_lpdf(fp[(self.t - 1, i)], eps);
                }
            }
        }
        Ok(lp)
    }

    /// GP prior on each knot row of `b`, priors on free linear coefficients,
    /// and the hyperpriors.
    pub fn log_prior(&self, state: &LatentState, cov: &CovMatrix) -> Result<f64> {
        state.hyper.validate()?;
        let n = self.n as f64;
        let logdet = cov.log_det();
        let mut lp = 0.0;
        for k in 0..self.layout.k {
            let bk = DVector::from_iterator(self.n, state.b.row(k).iter().copied());
            let alpha = state.hyper.alpha_for(k);
            let q = bk.dot(&cov.solve(&bk));
            lp += -n * HALF_LN_2PI - 0.5 * n * alpha.ln() - 0.5 * logdet - 0.5 * q / alpha;
        }
        let bs = self.config.priors.beta_scale;
        lp += state
            .extras
            .iter()
            .map(|&e| normal_lpdf(e / bs, 1.0) - bs.ln())
            .sum::<f64>();
        lp += self.hyperprior(&state.hyper);
        Ok(lp)
    }

    fn hyperprior(&self, h: &Hyperparams) -> f64 {
        let p = &self.config.priors;
        let mut lp: f64 = h
            .alpha
            .iter()
            .map(|&a| half_normal_lpdf(a, p.alpha_scale))
            .sum();
        lp += half_normal_lpdf(h.sigma, p.sigma_scale);
        lp += h
            .rho
            .iter()
            .map(|&r| gamma_lpdf(r, p.rho_shape, p.rho_rate))
            .sum::<f64>();
        lp
    }

    /// Log posterior in unconstrained coordinates (log-Jacobians included)
    /// and its gradient. Returns a non-finite value when the state is
    /// numerically infeasible.
    pub fn log_posterior_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; x.len()];
        let v = self.logp_grad(x, &mut g);
        (v, g)
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (n, k_len) = (self.n, l.k);
        let nb = l.n_b();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let h = self.hyper_from(x);
        if !(h.sigma > 0.0
            && h.alpha.iter().all(|&a| a > 0.0 && a.is_finite())
            && h.rho.iter().all(|&r| r > 0.0 && r.is_finite()))
        {
            return f64::NEG_INFINITY;
        }
        let cov = match CovMatrix::factorize(self.dist.correlation(&h.rho)) {
            Ok(cov) => cov,
            Err(_) => return f64::NEG_INFINITY,
        };
        // Non-centred rows lie in the null space of the designs, so the
        // likelihood does not depend on them.
        let mut u = x[..nb].to_vec();
        for (j, _) in self.noncentered.iter().enumerate().filter(|(_, &c)| c) {
            u[j * n..(j + 1) * n].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut xn = x.to_vec();
        xn[..nb].copy_from_slice(&self.rotate(&u, false));

        // Likelihood and linear-coefficient priors in natural coordinates.
        let mut d_log_sigma = 0.0;
        let mut lp = self.series_terms(&xn, h.sigma, grad, &mut d_log_sigma);
        // ∂/∂u_i = R·∂/∂b_i.
        let gu = self.rotate(&grad[..nb], true);
        grad[..nb].copy_from_slice(&gu);

        // GP prior over the rotated rows.
        let cinv = cov.inverse();
        let logdet = cov.log_det();
        let nf = n as f64;
        // M = Σ_j a_j·a_jᵀ/α − C⁻¹ over the centred rows.
        let mut m = DMatrix::zeros(n, n);
        let mut n_centred = 0.0;
        let mut d_log_alpha = vec![0.0; l.n_alpha];
        let mut d_log_rho = [0.0; N_LENGTHSCALES];
        for j in 0..k_len {
            let ai = if l.n_alpha == 1 { 0 } else { j };
            let alpha = h.alpha[ai];
            if self.noncentered[j] {
                let eta = &x[j * n..(j + 1) * n];
                lp += -nf * HALF_LN_2PI - 0.5 * eta.iter().map(|e| e * e).sum::<f64>();
                for r in 0..n {
                    grad[j * n + r] = -eta[r];
                }
            } else {
                let uj = DVector::from_column_slice(&u[j * n..(j + 1) * n]);
                let a = &cinv * &uj;
                let q = uj.dot(&a);
                lp += -nf * HALF_LN_2PI - 0.5 * nf * alpha.ln() - 0.5 * logdet - 0.5 * q / alpha;
                for r in 0..n {
                    grad[j * n + r] -= a[r] / alpha;
                }
                d_log_alpha[ai] += -0.5 * nf + 0.5 * q / alpha;
                m.ger(1.0 / alpha, &a, &a, 1.0);
                n_centred += 1.0;
            }
        }
        m -= &cinv * n_centred;
        if l.rho_free {
            let mc: Vec<f64> = m
                .as_slice()
                .iter()
                .zip(cov.c.as_slice())
                .map(|(a, b)| a * b)
                .collect();
            for g in 0..N_LENGTHSCALES {
                let rho2 = h.rho[g] * h.rho[g];
                // All three matrices are symmetric, so storage order does not matter.
                let s: f64 = mc
                    .iter()
                    .zip(&self.dist.groups[g])
                    .map(|(a, b)| a * b)
                    .sum();
                d_log_rho[g] = 0.5 * s / rho2;
            }
        }

        lp += self.hyperprior(&h);
        let pr = &self.config.priors;
        if l.alpha_free {
            for (ai, &alpha) in h.alpha.iter().enumerate() {
                let s2 = pr.alpha_scale * pr.alpha_scale;
                // Prior derivative, then the log-Jacobian `+ log α`.
                grad[l.alpha_offset() + ai] = d_log_alpha[ai] - alpha * alpha / s2 + 1.0;
                lp += alpha.ln();
            }
        }
        if l.rho_free {
            for g in 0..N_LENGTHSCALES {
                grad[l.rho_offset() + g] =
                    d_log_rho[g] + (pr.rho_shape - 1.0) - pr.rho_rate * h.rho[g] + 1.0;
                lp += h.rho[g].ln();
            }
        }
        if l.sigma_free {
            let s2 = pr.sigma_scale * pr.sigma_scale;
            grad[l.sigma_offset()] = d_log_sigma - h.sigma * h.sigma / s2 + 1.0;
            lp += h.sigma.ln();
        }
        lp
    }

    /// Per-series likelihood terms plus priors on free linear coefficients,
    /// over a natural vector. Writes gradients for `b` and the extras.
    fn series_terms(&self, x: &[f64], sigma: f64, grad: &mut [f64], d_log_sigma: &mut f64) -> f64 {
        let l = &self.layout;
        let (n, t_len, k_len, p) = (self.n, self.t, l.k, self.design.p);
        let inv_s2 = 1.0 / (sigma * sigma);
        let log_norm = -HALF_LN_2PI - sigma.ln();
        let v = self.constraints.v;
        let mut lp = 0.0;
        let mut th = vec![0.0; p];
        let mut dth = vec![0.0; p];
        for i in 0..n {
            for k in 0..k_len {
                th[k] = x[k * n + i];
            }
            for j in 0..l.extras {
                th[k_len + j] = x[l.extras_offset() + i * l.extras + j];
            }
            dth.iter_mut().for_each(|d| *d = 0.0);
            for t in 0..t_len {
                let idx = i * t_len + t;
                if t > 0 && self.observed[idx] {
                    let gr = self.design.g_row(t);
                    let r = self.y[idx] - dot(gr, &th);
                    lp += log_norm - 0.5 * r * r * inv_s2;
                    *d_log_sigma += -1.0 + r * r * inv_s2;
                    axpy(r * inv_s2, gr, &mut dth);
                }
                if self.constraints.monotone[idx] {
                    let dr = self.design.d_row(t);
                    let z = dot(dr, &th) / v;
                    lp += log_ndtr(z);
                    axpy(d_log_ndtr(z) / v, dr, &mut dth);
                }
            }
            if self.design.mode == SeriesMode::Soft {
                let eps2 = self.config.sigma_eps * self.config.sigma_eps;
                let gr = self.design.g_row(0);
                let f0 = dot(gr, &th);
                lp += normal_lpdf(f0, self.config.sigma_eps);
                axpy(-f0 / eps2, gr, &mut dth);
                if self.constraints.saturation {
                    let dr = self.design.d_row(t_len - 1);
                    let fp = dot(dr, &th);
                    lp += normal_lpdf(fp, self.config.sigma_eps);
                    axpy(-fp / eps2, dr, &mut dth);
                }
            }
            let bs = self.config.priors.beta_scale;
            for j in 0..l.extras {
                let e = th[k_len + j];
                lp += normal_lpdf(e, bs);
                dth[k_len + j] -= e / (bs * bs);
            }
            for k in 0..k_len {
                grad[k * n + i] += dth[k];
            }
            for j in 0..l.extras {
                grad[l.extras_offset() + i * l.extras + j] += dth[k_len + j];
            }
        }
        lp
    }

    /// Starting point: hyperparameters from their priors, spline coefficients
    /// from N(0, 0.1²). Series whose initial curve decreases are reflected so
    /// that the probit terms start out near zero.
    pub fn draw_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let l = &self.layout;
        let pr = &self.config.priors;
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * s
        };
        let b = DMatrix::from_fn(l.k, l.n, |_, _| normal(0.1));
        let extras = DMatrix::from_fn(l.extras, l.n, |_, _| normal(0.1));
        let alpha = (0..l.n_alpha)
            .map(|_| normal(pr.alpha_scale).abs().max(1e-3))
            .collect();
        let sigma = normal(pr.sigma_scale).abs().max(1e-2);
        let gamma = Gamma::new(pr.rho_shape, 1.0 / pr.rho_rate).expect("valid gamma prior");
        let rho = std::array::from_fn(|_| gamma.sample(rng).max(1e-2));
        let mut state = LatentState {
            b,
            extras,
            hyper: Hyperparams { alpha, rho, sigma },
        };
        if let Some(a) = &self.config.fixed.alpha {
            state.hyper.alpha = a.clone();
        }
        if let Some(r) = self.config.fixed.rho {
            state.hyper.rho = r;
        }
        if let Some(s) = self.config.fixed.sigma {
            state.hyper.sigma = s;
        }
        if self.constraints.has_monotonicity() {
            for i in 0..l.n {
                let th = self.theta(&state, i);
                let (_, fp) = self.curve_for(&th);
                let lo = fp.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = fp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if lo < 0.0 && -lo > hi {
                    for k in 0..l.k {
                        state.b[(k, i)] = -state.b[(k, i)];
                    }
                    for j in 0..l.extras {
                        state.extras[(j, i)] = -state.extras[(j, i)];
                    }
                }
            }
        }
        // Non-centred rows start from their standard-normal prior.
        let mut x = self.pack_natural(&state);
        let u = self.rotate(&x[..l.n_b()], true);
        x[..l.n_b()].copy_from_slice(&u);
        for j in 0..l.k {
            if self.noncentered[j] {
                for i in 0..l.n {
                    x[j * l.n + i] = StandardNormal.sample(rng);
                }
            }
        }
        x
    }
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        Model::logp_grad(self, x, grad)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.draw_initial(rng)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout.names()
    }

    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        Model::to_natural(self, x)
    }

    fn initial_inv_metric(&self) -> Vec<f64> {
        self.metric_guess()
    }
}

/// Principal axes of the coefficient part of the value and derivative
/// designs, as rows of an orthogonal matrix sorted by decreasing eigenvalue,
/// plus a flag for each axis the data cannot see.
fn principal_axes(design: &SeriesDesign, k_len: usize) -> (DMatrix<f64>, Vec<bool>) {
    let gram = DMatrix::from_fn(k_len, k_len, |a, b| {
        (0..design.t)
            .map(|t| {
                design.g_row(t)[a] * design.g_row(t)[b] + design.d_row(t)[a] * design.d_row(t)[b]
            })
            .sum::<f64>()
    });
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..k_len).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let null = order
        .iter()
        .map(|&o| eig.eigenvalues[o] <= 1e-10 * top)
        .collect();
    (
        DMatrix::from_fn(k_len, k_len, |j, k| eig.eigenvectors[(k, order[j])]),
        null,
    )
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normal_lpdf(x: f64, sd: f64) -> f64 {
    -HALF_LN_2PI - sd.ln() - 0.5 * (x / sd) * (x / sd)
}

fn half_normal_lpdf(x: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2 + normal_lpdf(x, scale)
}

fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - libm::lgamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Draws a random vector uniformly in `[-r, r]^d`; handy for generic targets.
pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-r..r)).collect()
}
