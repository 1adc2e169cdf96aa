//! Scalar numerics shared across the crate: a stable standard-normal log-CDF,
//! its derivative, and locale-independent 17-significant-digit formatting.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// ½·ln(2π)
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Beyond this argument `erfc` drifts toward the subnormal range.
const ERFCX_ASYMPTOTIC_FROM: f64 = 26.0;

/// Above this argument `Φ(x)` rounds to 1 and its log and derivative to 0
/// (both are below 1e-300 there).
const NDTR_SATURATES_FROM: f64 = 38.0;

/// Scaled complementary error function `exp(y²)·erfc(y)` for `y ≥ 0`.
pub fn erfcx(y: f64) -> f64 {
    debug_assert!(y >= 0.0 || y.is_nan());
    if y < ERFCX_ASYMPTOTIC_FROM {
        (y * y).exp() * libm::erfc(y)
    } else {
        // 1/(y√π) · Σ (-1)ⁿ (2n-1)!! / (2y²)ⁿ; eight terms are far below 1e-16 here.
        let inv = 1.0 / (2.0 * y * y);
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..=8 {
            term *= -((2 * n - 1) as f64) * inv;
            sum += term;
        }
        sum / (y * PI.sqrt())
    }
}

/// `ln Φ(x)` for the standard normal CDF, accurate across the whole real line.
pub fn log_ndtr(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > NDTR_SATURATES_FROM {
        0.0
    } else if x > 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        let y = -x * FRAC_1_SQRT_2;
        if y < ERFCX_ASYMPTOTIC_FROM {
            (0.5 * libm::erfc(y)).ln()
        } else {
            (0.5 * erfcx(y)).ln() - y * y
        }
    }
}

/// `d/dx ln Φ(x) = φ(x)/Φ(x)` (the inverse Mills ratio).
pub fn d_log_ndtr(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > NDTR_SATURATES_FROM {
        0.0
    } else if x > 0.0 {
        let pdf = (-0.5 * x * x - HALF_LN_2PI).exp();
        pdf / (1.0 - 0.5 * libm::erfc(x * FRAC_1_SQRT_2))
    } else {
        (2.0 / PI).sqrt() / erfcx(-x * FRAC_1_SQRT_2)
    }
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn ndtri(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log of the mean of `exp(values)`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (s / values.len() as f64).ln()
}

/// Linearly interpolated quantile of already sorted values (the usual
/// "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Formats like C's `%.17g`: 17 significant digits, trailing zeros trimmed,
/// independent of locale. Parsing the output recovers the exact `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    // Reference values computed with 50-digit arbitrary-precision arithmetic.
    const REFERENCE: &[(f64, f64, f64)] = &[
        (-1e5, -5000000012.4318639983, 100000.00001),
        (-1500.0, -1125008.2321593647389, 1500.0006666660740754),
        (-200.0, -20006.217280898190402, 200.00499975003124422),
        (-38.0, -726.5572160188201301, 38.026279466575868988),
        (-37.5, -707.66898931750719107, 37.526628874883653599),
        (-20.0, -203.91715537109726394, 20.049753068527850542),
        (-8.0, -35.013437159914549896, 8.1213681122361126807),
        (-5.0, -15.064998393988725736, 5.1865039671258421156),
        (-1.0, -1.8410216450092635058, 1.5251352761609812091),
        (0.0, -std::f64::consts::LN_2, 0.79788456080286535588),
        (0.5, -0.36894641528865639307, 0.50916043383703348583),
        (3.0, -0.0013508099647481937988, 0.0044378390421256637933),
        (8.0, -6.2209605742717860585e-16, 5.0522710835368954309e-15),
        (12.0, -1.7764821120776789978e-33, 2.146383735663060345e-32),
    ];

    #[test]
    fn log_ndtr_matches_reference() {
        for &(x, lp, _) in REFERENCE {
            let got = log_ndtr(x);
            let tol = 1e-10 * lp.abs().max(1e-300);
            assert!(
                (got - lp).abs() <= tol.max(1e-10 * lp.abs()),
                "x={x}: {got} vs {lp}"
            );
        }
    }

    #[test]
    fn log_ndtr_absolute_accuracy_on_working_range() {
        for &(x, lp, _) in REFERENCE.iter().filter(|r| (-38.0..=8.0).contains(&r.0)) {
            assert!((log_ndtr(x) - lp).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn inverse_mills_matches_reference() {
        for &(x, _, mills) in REFERENCE {
            let got = d_log_ndtr(x);
            assert!(
                (got - mills).abs() <= 1e-12 * mills.abs(),
                "x={x}: {got} vs {mills}"
            );
        }
    }

    #[test]
    fn log_ndtr_is_continuous_at_branch_switch() {
        let x0 = -ERFCX_ASYMPTOTIC_FROM * std::f64::consts::SQRT_2;
        let a = log_ndtr(x0 + 1e-9);
        let b = log_ndtr(x0 - 1e-9);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn probit_midpoint() {
        assert!((log_ndtr(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fmt17_round_trips() {
        for &x in &[
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            6.02214076e23,
            123456.789,
            1e-5,
            9.999_999_999_999_999e16,
            f64::MIN_POSITIVE,
            -0.0,
        ] {
            let s = fmt17(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s}");
        }
        assert_eq!(fmt17(0.25), "0.25");
        assert_eq!(fmt17(3.0), "3");
        assert_eq!(fmt17(1e20), "1e+20");
    }

    #[test]
    fn log_mean_exp_basic() {
        let v = [0.0f64.ln(), 1.0f64.ln()];
        assert!((log_mean_exp(&v) - 0.5f64.ln()).abs() < 1e-15);
    }
}
