//! Sampler behaviour on targets with known answers.

use gpspline::config::SamplerConfig;
use gpspline::sampler::diagnostics::ess_bulk;
use gpspline::sampler::nuts::{Integrator, Point};
use gpspline::sampler::{run_hmc, LogDensity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Twisted Gaussian: `x1 ~ N(0, s²)`, `x2 | x1 ~ N(b·(x1² − s²), 1)`.
struct Banana {
    s: f64,
    b: f64,
}

impl LogDensity for Banana {
    fn dim(&self) -> usize {
        2
    }
    fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let z1 = x[0] / self.s;
        let r = x[1] - self.b * (x[0] * x[0] - self.s * self.s);
        g[0] = -z1 / self.s + r * 2.0 * self.b * x[0];
        g[1] = -r;
        -0.5 * z1 * z1 - 0.5 * r * r
    }
}

/// Zero-mean bivariate Gaussian with unit variances and correlation `rho`.
struct Correlated {
    rho: f64,
}

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }
    fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let d = 1.0 - self.rho * self.rho;
        g[0] = -(x[0] - self.rho * x[1]) / d;
        g[1] = -(x[1] - self.rho * x[0]) / d;
        -0.5 * (x[0] * x[0] - 2.0 * self.rho * x[0] * x[1] + x[1] * x[1]) / d
    }
}

fn cfg(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 500,
        samples: 1000,
        seed,
        ..Default::default()
    }
}

#[test]
fn banana_draws_are_deterministic_per_seed() {
    let target = Banana { s: 2.0, b: 0.3 };
    let a = run_hmc(&target, &cfg(5)).unwrap();
    let b = run_hmc(&target, &cfg(5)).unwrap();
    assert_eq!(a, b);
    let c = run_hmc(&target, &cfg(6)).unwrap();
    assert_ne!(a.chains[0].draws, c.chains[0].draws);
}

#[test]
fn banana_moments() {
    let target = Banana { s: 2.0, b: 0.1 };
    // A higher acceptance target keeps steps small enough for the quartic tails.
    let c = SamplerConfig {
        target_accept: 0.95,
        ..cfg(7)
    };
    let d = run_hmc(&target, &c).unwrap().diagnostics(10);
    // E[x1] = 0, sd(x1) = 2, E[x2] = 0, Var(x2) = 1 + b²·2s⁴.
    let sd2 = (1.0 + 0.01 * 2.0 * 16.0f64).sqrt();
    assert!(
        d.params[0].mean.abs() < 4.0 * 2.0 / d.params[0].ess_bulk.sqrt(),
        "{d:?}"
    );
    assert!(
        d.params[1].mean.abs() < 4.0 * sd2 / d.params[1].ess_bulk.sqrt(),
        "{d:?}"
    );
    assert!((d.params[0].sd / 2.0 - 1.0).abs() < 0.1, "{d:?}");
    assert!((d.params[1].sd / sd2 - 1.0).abs() < 0.15, "{d:?} {sd2}");
    assert!(
        d.max_rhat < gpspline::fit::RHAT_THRESHOLD,
        "rhat {}",
        d.max_rhat
    );
    assert_eq!(d.divergences.iter().sum::<usize>(), 0);
}

#[test]
fn leapfrog_is_time_reversible() {
    let target = Banana { s: 2.0, b: 0.3 };
    let integ = Integrator {
        target: &target,
        inv_metric: vec![1.3, 0.7],
        step: 0.05,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let q0 = vec![
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        let mut z = Point::new(&target, q0.clone());
        integ.sample_momentum(&mut z, &mut rng);
        let p0 = z.p.clone();
        for _ in 0..50 {
            integ.leapfrog(&mut z, integ.step);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..50 {
            integ.leapfrog(&mut z, integ.step);
        }
        for j in 0..2 {
            assert!(
                (z.q[j] - q0[j]).abs() < 1e-8,
                "q[{j}]: {} vs {}",
                z.q[j],
                q0[j]
            );
            assert!((z.p[j] + p0[j]).abs() < 1e-8);
        }
    }
}

/// Largest |H − H₀| along a trajectory of total length `length`.
fn max_energy_error(target: &Correlated, q0: &[f64], p0: &[f64], step: f64, length: f64) -> f64 {
    let integ = Integrator {
        target,
        inv_metric: vec![1.0, 1.0],
        step,
    };
    let mut z = Point::new(target, q0.to_vec());
    z.p = p0.to_vec();
    let h0 = integ.hamiltonian(&z);
    let steps = (length / step).round() as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        integ.leapfrog(&mut z, step);
        worst = worst.max((integ.hamiltonian(&z) - h0).abs());
    }
    worst
}

#[test]
fn energy_error_is_second_order() {
    let target = Correlated { rho: 0.9 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let q0: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p0: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let coarse = max_energy_error(&target, &q0, &p0, 0.02, 2.0);
        let fine = max_energy_error(&target, &q0, &p0, 0.002, 2.0);
        let ratio = coarse / fine;
        assert!((80.0..125.0).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn ess_of_ar1_matches_theory() {
    // AR(1) with φ = 0.9: integrated autocorrelation time (1+φ)/(1−φ) = 19.
    let phi: f64 = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut x: f64 = StandardNormal.sample(&mut rng);
            (0..10_000)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x = phi * x + (1.0 - phi * phi).sqrt() * e;
                    x
                })
                .collect()
        })
        .collect();
    let theory = 40_000.0 / 19.0;
    let ess = ess_bulk(&chains).value;
    assert!((ess / theory - 1.0).abs() < 0.3, "ESS {ess} vs {theory}");
}
