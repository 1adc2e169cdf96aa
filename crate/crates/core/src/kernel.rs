//! Squared-exponential ARD correlation over standardized inputs, with the two
//! spatial coordinates sharing one lengthscale, plus the Gaussian conditional
//! used for prediction at new locations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{StandardizedInputs, INPUT_DIM};
use crate::error::{Error, Result};

/// Number of distinct lengthscales: H, S, I, and one for (Sx, Sy).
pub const N_LENGTHSCALES: usize = 4;

/// Maps an input column (`H, S, I, Sx, Sy`) to its lengthscale.
pub const LENGTHSCALE_OF_INPUT: [usize; INPUT_DIM] = [0, 1, 2, 3, 3];

pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// GP scale; one entry when shared across knots, `K` entries otherwise.
    /// The prior covariance of a coefficient row is `alpha·C`.
    pub alpha: Vec<f64>,
    pub rho: [f64; N_LENGTHSCALES],
    pub sigma: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha
            .iter()
            .chain(self.rho.iter())
            .chain(std::iter::once(&self.sigma));
        for v in all {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Domain(format!(
                    "hyperparameters must be positive, got {v}"
                )));
            }
        }
        if self.alpha.is_empty() {
            return Err(Error::Domain("alpha must have at least one entry".into()));
        }
        Ok(())
    }

    /// Scale applied to knot row `k`.
    pub fn alpha_for(&self, k: usize) -> f64 {
        if self.alpha.len() == 1 {
            self.alpha[0]
        } else {
            self.alpha[k]
        }
    }
}

/// Per-lengthscale squared distances between two point sets, each stored
/// row-major as `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqDistances {
    pub rows: usize,
    pub cols: usize,
    pub groups: [Vec<f64>; N_LENGTHSCALES],
    /// Distances of a point set to itself; only one triangle is evaluated.
    pub symmetric: bool,
}

impl SqDistances {
    pub fn between(a: &DMatrix<f64>, b: &DMatrix<f64>) -> SqDistances {
        let (rows, cols) = (a.nrows(), b.nrows());
        let mut groups: [Vec<f64>; N_LENGTHSCALES] =
            std::array::from_fn(|_| vec![0.0; rows * cols]);
        for i in 0..rows {
            for j in 0..cols {
                for d in 0..INPUT_DIM {
                    let diff = a[(i, d)] - b[(j, d)];
                    groups[LENGTHSCALE_OF_INPUT[d]][i * cols + j] += diff * diff;
                }
            }
        }
        SqDistances {
            rows,
            cols,
            groups,
            symmetric: false,
        }
    }

    /// Distances among the rows of `a`.
    pub fn within(a: &DMatrix<f64>) -> SqDistances {
        SqDistances {
            symmetric: true,
            ..Self::between(a, a)
        }
    }

    /// `exp(−½ Σ_g r_g / ρ_g²)` as a `rows × cols` matrix.
    pub fn correlation(&self, rho: &[f64; N_LENGTHSCALES]) -> DMatrix<f64> {
        let inv: [f64; N_LENGTHSCALES] = std::array::from_fn(|g| 0.5 / (rho[g] * rho[g]));
        let value = |idx: usize| -> f64 {
            let s: f64 = (0..N_LENGTHSCALES)
                .map(|g| self.groups[g][idx] * inv[g])
                .sum();
            (-s).exp()
        };
        if !self.symmetric {
            return DMatrix::from_fn(self.rows, self.cols, |i, j| value(i * self.cols + j));
        }
        let n = self.rows;
        let mut c = DMatrix::identity(n, n);
        for j in 0..n {
            for i in j + 1..n {
                let v = value(i * n + j);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }
}

/// A factorised correlation matrix `C + jitter·I = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub c: DMatrix<f64>,
    pub jitter: f64,
    pub chol: DMatrix<f64>,
}

impl CovMatrix {
    /// Factorises `c`, escalating diagonal jitter ×10 from 1e-8 up to 1e-4.
    pub fn factorize(c: DMatrix<f64>) -> Result<CovMatrix> {
        let n = c.nrows();
        let mut jitter = JITTER_START;
        loop {
            let mut m = c.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                return Ok(CovMatrix {
                    c,
                    jitter,
                    chol: ch.unpack(),
                });
            }
            if jitter >= JITTER_MAX {
                return Err(Error::IndefiniteCovariance { jitter });
            }
            jitter *= 10.0;
        }
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Solves `(C + jitter·I)·x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .chol
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a nonzero diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .chol
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a nonzero diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `(C + jitter·I)⁻¹ = L⁻ᵀ·L⁻¹`, with `L⁻¹` by forward substitution.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l = self.chol.as_slice();
        // Column-major lower-triangular inverse.
        let mut li = vec![0.0; n * n];
        for j in 0..n {
            li[j * n + j] = 1.0 / l[j * n + j];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s += l[k * n + i] * li[j * n + k];
                }
                li[j * n + i] = -s / l[i * n + i];
            }
        }
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let mut s = 0.0;
                for k in i..n {
                    s += li[i * n + k] * li[j * n + k];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Correlation among the rows of `x` (N×5, standardized).
pub fn se_ard_cov(x: &DMatrix<f64>, rho: &[f64; N_LENGTHSCALES]) -> Result<CovMatrix> {
    check_rho(rho)?;
    let dist = SqDistances::within(x);
    CovMatrix::factorize(dist.correlation(rho))
}

/// Cross-correlation `M × N` between new points and training points.
pub fn cross_cov(
    x: &DMatrix<f64>,
    xstar: &DMatrix<f64>,
    rho: &[f64; N_LENGTHSCALES],
) -> Result<DMatrix<f64>> {
    check_rho(rho)?;
    if x.ncols() != INPUT_DIM || xstar.ncols() != INPUT_DIM {
        return Err(Error::Dimension(format!(
            "inputs must have {INPUT_DIM} columns"
        )));
    }
    Ok(SqDistances::between(xstar, x).correlation(rho))
}

/// New points standardized with a particular set of training scales.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedPoints {
    pub x: DMatrix<f64>,
    pub offsets: [f64; INPUT_DIM],
    pub scales: [f64; INPUT_DIM],
}

impl StandardizedInputs {
    pub fn standardize_points(&self, raw: &DMatrix<f64>) -> StandardizedPoints {
        StandardizedPoints {
            x: self.apply_matrix(raw),
            offsets: self.offsets,
            scales: self.scales,
        }
    }
}

/// [`cross_cov`] that refuses points standardized with different scales.
pub fn cross_cov_checked(
    train: &StandardizedInputs,
    points: &StandardizedPoints,
    rho: &[f64; N_LENGTHSCALES],
) -> Result<DMatrix<f64>> {
    if points.scales != train.scales || points.offsets != train.offsets {
        return Err(Error::Domain(
            "prediction inputs were standardized with different scales than the training inputs"
                .into(),
        ));
    }
    cross_cov(&train.x, &points.x, rho)
}

fn check_rho(rho: &[f64; N_LENGTHSCALES]) -> Result<()> {
    if rho.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Domain(format!(
            "lengthscales must be positive, got {rho:?}"
        )));
    }
    Ok(())
}

/// Mean and covariance of `b*` given a coefficient row `b_k` under the prior
/// `alpha·C`. The covariance is symmetrised and its eigenvalues floored at 0.
pub fn gp_conditional(
    cov: &CovMatrix,
    cstar: &DMatrix<f64>,
    cstarstar: &DMatrix<f64>,
    b_k: &DVector<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.dim();
    if cstar.ncols() != n || b_k.len() != n {
        return Err(Error::Dimension(
            "conditional inputs disagree with the covariance size".into(),
        ));
    }
    let m = cstar.nrows();
    if cstarstar.shape() != (m, m) {
        return Err(Error::Dimension("test covariance must be M×M".into()));
    }
    let a = cov.solve(b_k);
    let mean = cstar * a;
    let v = cov.solve_matrix(&cstar.transpose());
    let mut c = (cstarstar - cstar * v) * alpha;
    c = (&c + c.transpose()) * 0.5;
    Ok((mean, clip_psd(c)))
}

fn clip_psd(c: DMatrix<f64>) -> DMatrix<f64> {
    if c.nrows() == 1 {
        return DMatrix::from_element(1, 1, c[(0, 0)].max(0.0));
    }
    let eig = c.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return c;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, INPUT_DIM, |_, _| rng.random_range(-2.0..2.0))
    }

    fn scalar_corr(a: &[f64], b: &[f64], rho: &[f64; 4]) -> f64 {
        let mut s = 0.0;
        for d in 0..5 {
            let r = if d >= 3 { rho[3] } else { rho[d] };
            s += (a[d] - b[d]).powi(2) / (r * r);
        }
        (-0.5 * s).exp()
    }

    fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
        x.row(i).iter().copied().collect()
    }

    #[test]
    fn inverse_and_symmetric_correlation_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_x(&mut rng, 9);
        let rho = [0.7, 1.3, 2.0, 0.9];
        let sym = SqDistances::within(&x).correlation(&rho);
        let full = SqDistances::between(&x, &x).correlation(&rho);
        assert!((&sym - &full).amax() < 1e-15);
        let cov = CovMatrix::factorize(sym).unwrap();
        let mut jittered = cov.c.clone();
        for i in 0..9 {
            jittered[(i, i)] += cov.jitter;
        }
        let dense = jittered.try_inverse().unwrap();
        let rel = (&cov.inverse() - &dense).amax() / dense.amax();
        assert!(rel < 1e-9, "{rel}");
    }

    #[test]
    fn identical_rows_have_unit_correlation() {
        let x = DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let c = se_ard_cov(&x, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.c[(0, 1)], 1.0);
        assert!(c.jitter >= JITTER_START);
    }

    #[test]
    fn single_term_formula() {
        let (delta, ell) = (0.7, 1.3);
        let x =
            DMatrix::from_row_slice(2, 5, &[0.0, 0.0, 0.0, 0.0, 0.0, delta, 0.0, 0.0, 0.0, 0.0]);
        let c = se_ard_cov(&x, &[ell, 2.0, 3.0, 4.0]).unwrap();
        let expect = (-delta * delta / (2.0 * ell * ell)).exp();
        assert!((c.c[(0, 1)] - expect).abs() < 1e-15);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_x(&mut rng, 3);
        let rho = [0.5, 1.5, 0.9, 2.2];
        let c = se_ard_cov(&x, &rho).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = scalar_corr(&row(&x, i), &row(&x, j), &rho);
                assert!((c.c[(i, j)] - e).abs() < 1e-12);
            }
        }
        let l = &c.chol;
        let mut recon = l * l.transpose();
        for i in 0..3 {
            recon[(i, i)] -= c.jitter;
        }
        assert!((recon - &c.c).abs().max() < 1e-10);
    }

    #[test]
    fn cross_cov_self_consistency_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_x(&mut rng, 4);
        let rho = [1.0, 0.8, 1.2, 2.0];
        let c = se_ard_cov(&x, &rho).unwrap();
        let cs = cross_cov(&x, &x, &rho).unwrap();
        assert!((cs - &c.c).abs().max() == 0.0);

        let far = DMatrix::from_row_slice(1, 5, &[1e6, 0.0, 0.0, 0.0, 0.0]);
        let cf = cross_cov(&x, &far, &rho).unwrap();
        assert!(cf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_cov_random_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, 3);
        let xs = random_x(&mut rng, 2);
        let rho = [0.7, 1.1, 0.4, 3.0];
        let cs = cross_cov(&x, &xs, &rho).unwrap();
        for m in 0..2 {
            for i in 0..3 {
                assert!((cs[(m, i)] - scalar_corr(&row(&xs, m), &row(&x, i), &rho)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checked_cross_cov_rejects_foreign_scales() {
        let x = DMatrix::from_fn(3, 5, |i, d| (i * 3 + d * d) as f64 + 0.5 * (i as f64).sin());
        let train = crate::data::standardize_inputs(&x, Default::default()).unwrap();
        let mut pts = train.standardize_points(&x);
        assert!(cross_cov_checked(&train, &pts, &[1.0; 4]).is_ok());
        pts.scales[0] *= 2.0;
        assert!(cross_cov_checked(&train, &pts, &[1.0; 4]).is_err());
    }

    #[test]
    fn conditional_interpolates_observed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(&mut rng, 5);
        let rho = [1.0, 1.0, 1.0, 1.0];
        let cov = se_ard_cov(&x, &rho).unwrap();
        let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let xs = x.rows(2, 1).into_owned();
        let cs = cross_cov(&x, &xs, &rho).unwrap();
        let css = DMatrix::identity(1, 1);
        let alpha = 0.7;
        let (mean, var) = gp_conditional(&cov, &cs, &css, &b, alpha).unwrap();
        assert!((mean[0] - b[2]).abs() < 1e-6);
        assert!(var[(0, 0)] <= cov.jitter * alpha * 1.0001);
    }

    #[test]
    fn conditional_reverts_to_prior_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_x(&mut rng, 4);
        let rho = [1.0, 1.0, 1.0, 1.0];
        let cov = se_ard_cov(&x, &rho).unwrap();
        let b = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let far = DMatrix::from_row_slice(1, 5, &[1e4, 0.0, 0.0, 0.0, 0.0]);
        let cs = cross_cov(&x, &far, &rho).unwrap();
        let (mean, var) = gp_conditional(&cov, &cs, &DMatrix::identity(1, 1), &b, 2.5).unwrap();
        assert_eq!(mean[0], 0.0);
        assert!((var[(0, 0)] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn conditional_matches_joint_inversion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let m = 2;
        let x = random_x(&mut rng, n);
        let xs = random_x(&mut rng, m);
        let rho = [1.3, 0.9, 1.7, 1.1];
        let alpha = 0.8;
        let cov = se_ard_cov(&x, &rho).unwrap();
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let cs = cross_cov(&x, &xs, &rho).unwrap();
        let css = cross_cov(&xs, &xs, &rho).unwrap();
        let (mean, var) = gp_conditional(&cov, &cs, &css, &b, alpha).unwrap();

        // Joint (N+M) covariance; condition through its precision matrix.
        let mut joint = DMatrix::zeros(n + m, n + m);
        for i in 0..n + m {
            for j in 0..n + m {
                let ri = if i < n { row(&x, i) } else { row(&xs, i - n) };
                let rj = if j < n { row(&x, j) } else { row(&xs, j - n) };
                joint[(i, j)] = alpha * scalar_corr(&ri, &rj, &rho);
            }
        }
        for i in 0..n {
            joint[(i, i)] += alpha * cov.jitter;
        }
        let prec = joint.try_inverse().unwrap();
        let p_ss = prec.view((n, n), (m, m)).into_owned();
        let p_so = prec.view((n, 0), (m, n)).into_owned();
        let cond_cov = p_ss.clone().try_inverse().unwrap();
        let cond_mean = -&cond_cov * p_so * &b;
        assert!((mean - cond_mean).abs().max() < 1e-8);
        assert!((var - cond_cov).abs().max() < 1e-8);
    }

    #[test]
    fn monotone_decay_in_each_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho = [0.8, 1.4, 2.0, 1.1];
        for _ in 0..200 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut b = a.clone();
            let d = rng.random_range(0..5);
            b[d] += rng.random_range(0.0..1.0);
            let mut c = b.clone();
            c[d] += rng.random_range(0.0..1.0);
            assert!(scalar_corr(&a, &c, &rho) <= scalar_corr(&a, &b, &rho));
            let xm = DMatrix::from_row_slice(3, 5, &[a.clone(), b.clone(), c.clone()].concat());
            let k = SqDistances::between(&xm, &xm).correlation(&rho);
            assert!(k[(0, 2)] <= k[(0, 1)]);
        }
    }

    #[test]
    fn huge_lengthscale_removes_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, 5);
        let mut dropped = x.clone();
        dropped.column_mut(1).fill(0.0);
        let with = SqDistances::between(&x, &x).correlation(&[0.9, 1e8, 1.3, 0.7]);
        let without = SqDistances::between(&dropped, &dropped).correlation(&[0.9, 1.0, 1.3, 0.7]);
        assert!((with - without).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_non_positive_lengthscale() {
        let x = DMatrix::from_fn(2, 5, |i, d| (i + d) as f64);
        assert!(matches!(
            se_ard_cov(&x, &[1.0, 0.0, 1.0, 1.0]),
            Err(Error::Domain(_))
        ));
    }
}
