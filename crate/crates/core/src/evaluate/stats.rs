//! One-sample goodness-of-fit tests for PIT values.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    /// Uniformity is not rejected at `level`.
    pub fn passes(&self, level: f64) -> bool {
        self.p_value > level
    }
}

/// Kolmogorov–Smirnov test of `values` against Uniform(0, 1), with the
/// asymptotic distribution and Stephens' small-sample correction.
pub fn ks_uniform(values: &[f64]) -> KsResult {
    let n = values.len();
    if n == 0 {
        return KsResult {
            n,
            statistic: f64::NAN,
            p_value: f64::NAN,
        };
    }
    let mut u = values.to_vec();
    u.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / nf - v).max(v - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    let sn = nf.sqrt();
    KsResult {
        n,
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
    }
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn known_critical_values() {
        // Asymptotic 5% and 1% points.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn statistic_by_hand() {
        let r = ks_uniform(&[0.1, 0.4, 0.7]);
        // At 0.7 the ECDF reaches 1, the largest gap.
        assert!((r.statistic - 0.3).abs() < 1e-12, "{}", r.statistic);
    }

    #[test]
    fn uniform_sample_passes_and_skewed_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        assert!(ks_uniform(&u).passes(0.01));
        let skewed: Vec<f64> = u.iter().map(|v| v * v).collect();
        assert!(!ks_uniform(&skewed).passes(0.01));
    }
}
