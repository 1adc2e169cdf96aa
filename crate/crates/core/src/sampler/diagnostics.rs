//! Convergence diagnostics over several chains of scalar draws.

use crate::numeric::ndtri;

/// A diagnostic value with a flag for degenerate input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub degenerate: bool,
}

/// Splits every chain in half, dropping the middle draw of odd-length chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(&c[..h]);
        out.push(&c[c.len() - h..]);
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic potential scale reduction computed over the split half-chains.
/// Zero within-chain variance yields `+inf` and the degenerate flag.
pub fn split_rhat(chains: &[Vec<f64>]) -> Diagnostic {
    let parts = split_chains(chains);
    let m = parts.len() as f64;
    let n = parts.first().map_or(0, |p| p.len());
    if parts.len() < 2 || n < 2 {
        return Diagnostic {
            value: f64::NAN,
            degenerate: true,
        };
    }
    let nf = n as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = parts.iter().map(|p| var(p)).sum::<f64>() / m;
    if !(w > 0.0) {
        return Diagnostic {
            value: f64::INFINITY,
            degenerate: true,
        };
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Diagnostic {
        value: (var_plus / w).sqrt(),
        degenerate: false,
    }
}

/// Fractional ranks (ties averaged), starting at 1.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Normal scores `Φ⁻¹((r − 3/8)/(S + 1/4))` of the pooled draws.
pub fn rank_normalize(parts: &[&[f64]]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    let s = pooled.len() as f64;
    let r = ranks(&pooled);
    let mut out = Vec::with_capacity(parts.len());
    let mut off = 0;
    for p in parts {
        out.push(
            r[off..off + p.len()]
                .iter()
                .map(|&ri| ndtri((ri - 0.375) / (s + 0.25)))
                .collect(),
        );
        off += p.len();
    }
    out
}

/// Biased autocovariance of `x` at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag)
        .map(|i| (x[i] - m) * (x[i + lag] - m))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size by Geyer's initial monotone sequence.
pub fn ess(parts: &[Vec<f64>]) -> Diagnostic {
    let m = parts.len();
    let n = parts.first().map_or(0, |p| p.len());
    if m == 0 || n < 4 {
        return Diagnostic {
            value: 0.0,
            degenerate: true,
        };
    }
    let nf = n as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let mean_acov = |lag: usize| -> f64 {
        parts
            .iter()
            .zip(&means)
            .map(|(p, &mu)| autocov(p, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let mean_var = mean_acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += var(&means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return Diagnostic {
            value: 0.0,
            degenerate: true,
        };
    }
    let rho = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    even = 1.0;
    let mut t = 1;
    while t < n - 3 && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t - 2;
    if even > 0.0 {
        rho_hat[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let mut tau = -1.0 + 2.0 * rho_hat[..=max_t].iter().sum::<f64>() + rho_hat[max_t + 1];
    tau = tau.max(1.0 / total.log10());
    Diagnostic {
        value: total / tau,
        degenerate: false,
    }
}

/// Bulk effective sample size: rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Diagnostic {
    let parts = split_chains(chains);
    if parts.iter().any(|p| p.len() < 4) {
        return Diagnostic {
            value: 0.0,
            degenerate: true,
        };
    }
    let first = parts[0][0];
    if parts.iter().all(|p| p.iter().all(|&v| v == first)) {
        return Diagnostic {
            value: 0.0,
            degenerate: true,
        };
    }
    ess(&rank_normalize(&parts))
}
