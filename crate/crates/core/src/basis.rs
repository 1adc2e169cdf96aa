//! Quadratic radial spline basis with a Crainiceanu-style penalty
//! reparameterisation `W = Z·Ω^{-1/2}`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value truncation for `Ω^{-1/2}`.
pub const PENALTY_TRUNCATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub times: Vec<f64>,
    pub knots: Vec<f64>,
    pub penalty_power: f64,
    /// T×2, row `(1, t)`.
    pub h: DMatrix<f64>,
    /// T×K, `(t − κ_k)²`.
    pub z: DMatrix<f64>,
    /// K×K, `|κ_l − κ_k|^p`.
    pub omega: DMatrix<f64>,
    pub omega_inv_sqrt: DMatrix<f64>,
    /// T×K penalized design.
    pub w: DMatrix<f64>,
    /// T×K time derivative of `w`.
    pub dw: DMatrix<f64>,
}

/// `K` equally spaced interior knots, endpoints excluded.
pub fn make_knots(times: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("knot count must be at least 1".into()));
    }
    if times.len() < 3 {
        return Err(Error::Dimension(format!(
            "need at least 3 time points, got {}",
            times.len()
        )));
    }
    if k >= times.len() {
        log::warn!(
            "{k} knots for {} time points over-parameterises the spline",
            times.len()
        );
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (k as f64 + 1.0);
    Ok((1..=k).map(|j| lo + j as f64 * step).collect())
}

/// Symmetric inverse square root of a penalty matrix from its singular value
/// decomposition, `U·diag(s^{-1/2})·Vᵀ`, with singular values below
/// `1e-10·max(s)` dropped.
///
/// The squared-distance penalty has a zero diagonal and is therefore
/// indefinite; working on singular values keeps the factor real.
pub fn penalty_inverse_sqrt(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = omega.nrows();
    if omega.ncols() != k {
        return Err(Error::Dimension("penalty matrix must be square".into()));
    }
    let svd = omega.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = PENALTY_TRUNCATION * s_max;
    if !(s_max > 0.0) {
        return Err(Error::DegeneratePenalty);
    }
    let mut out = DMatrix::zeros(k, k);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let w = s.powf(-0.5);
        for r in 0..k {
            for c in 0..k {
                out[(r, c)] += u[(r, j)] * w * v_t[(j, c)];
            }
        }
    }
    Ok(out)
}

impl SplineBasis {
    pub fn new(times: &[f64], knots: &[f64]) -> Result<SplineBasis> {
        Self::with_penalty_power(times, knots, 2.0)
    }

    pub fn with_penalty_power(
        times: &[f64],
        knots: &[f64],
        penalty_power: f64,
    ) -> Result<SplineBasis> {
        let t = times.len();
        let k = knots.len();
        if k == 0 {
            return Err(Error::Config("basis needs at least one knot".into()));
        }
        let h = DMatrix::from_fn(t, 2, |r, c| if c == 0 { 1.0 } else { times[r] });
        let z = DMatrix::from_fn(t, k, |r, c| (times[r] - knots[c]).powi(2));
        let dz = DMatrix::from_fn(t, k, |r, c| 2.0 * (times[r] - knots[c]));
        let omega = DMatrix::from_fn(k, k, |l, c| {
            let d = (knots[l] - knots[c]).abs();
            if penalty_power == 2.0 {
                d * d
            } else {
                d.powf(penalty_power)
            }
        });
        // A single knot has Ω = [0]: nothing to penalise against, so the raw
        // basis function is used as is.
        let omega_inv_sqrt = if k == 1 {
            DMatrix::identity(1, 1)
        } else {
            penalty_inverse_sqrt(&omega)?
        };
        let w = &z * &omega_inv_sqrt;
        let dw = &dz * &omega_inv_sqrt;
        Ok(SplineBasis {
            times: times.to_vec(),
            knots: knots.to_vec(),
            penalty_power,
            h,
            z,
            omega,
            omega_inv_sqrt,
            w,
            dw,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Rows of `W` and `∂W/∂t` at an arbitrary time.
    pub fn rows_at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let k = self.n_knots();
        let mut w = vec![0.0; k];
        let mut dw = vec![0.0; k];
        for (j, &kj) in self.knots.iter().enumerate() {
            let z = (t - kj).powi(2);
            let dz = 2.0 * (t - kj);
            for c in 0..k {
                w[c] += z * self.omega_inv_sqrt[(j, c)];
                dw[c] += dz * self.omega_inv_sqrt[(j, c)];
            }
        }
        (w, dw)
    }

    fn check_dims(&self, beta: &[f64; 2], b: &[f64]) -> Result<()> {
        let _ = beta;
        if b.len() != self.n_knots() {
            return Err(Error::Dimension(format!(
                "{} spline coefficients for {} knots",
                b.len(),
                self.n_knots()
            )));
        }
        Ok(())
    }

    /// `f = H·β + W·b`.
    pub fn eval_function(&self, beta: &[f64; 2], b: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(beta, b)?;
        Ok((0..self.n_times())
            .map(|t| {
                beta[0]
                    + beta[1] * self.times[t]
                    + (0..b.len()).map(|k| self.w[(t, k)] * b[k]).sum::<f64>()
            })
            .collect())
    }

    /// `f′ = β₂ + W′·b`.
    pub fn eval_derivative(&self, beta: &[f64; 2], b: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(beta, b)?;
        Ok((0..self.n_times())
            .map(|t| beta[1] + (0..b.len()).map(|k| self.dw[(t, k)] * b[k]).sum::<f64>())
            .collect())
    }
}
