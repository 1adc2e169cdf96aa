//! Multi-chain Hamiltonian Monte Carlo with warmup adaptation.

pub mod adapt;
pub mod diagnostics;
pub mod nuts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, SamplerConfig};
use crate::error::{Error, Result};
use adapt::{DualAveraging, Welford, WindowSchedule};
use diagnostics::{ess_bulk, split_rhat};
use nuts::{Integrator, Point, TransitionStats};

/// Attempts at finding a finite starting point per chain.
pub const MAX_INIT_ATTEMPTS: usize = 100;

/// A differentiable log density over an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density, which may
    /// be non-finite for infeasible points.
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        crate::model::uniform_init(rng, self.dim(), 2.0)
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Diagonal inverse metric used until the first adaptation window ends.
    fn initial_inv_metric(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    /// Maps an unconstrained point to reported parameter values.
    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// Draws and per-iteration statistics of one chain after warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// `samples × dim`, natural scale.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub lp: Vec<f64>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    /// Leapfrog steps spent during warmup.
    pub warmup_leapfrogs: usize,
}

impl ChainDraws {
    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Diagnostics {
    pub params: Vec<ParamSummary>,
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub max_treedepth_hits: Vec<usize>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of parameter `j`, one vector per chain.
    pub fn param(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[j]).collect())
            .collect()
    }

    /// All draws chain after chain.
    pub fn iter_draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn diagnostics(&self, max_treedepth: usize) -> Diagnostics {
        let params: Vec<ParamSummary> = (0..self.dim())
            .map(|j| {
                let chains = self.param(j);
                let all: Vec<f64> = chains.iter().flatten().copied().collect();
                let n = all.len() as f64;
                let mean = all.iter().sum::<f64>() / n;
                let sd =
                    (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
                let r = split_rhat(&chains);
                let e = ess_bulk(&chains);
                ParamSummary {
                    name: self.names[j].clone(),
                    mean,
                    sd,
                    rhat: r.value,
                    ess_bulk: e.value,
                    degenerate: r.degenerate || e.degenerate,
                }
            })
            .collect();
        let max_rhat = params
            .iter()
            .map(|p| p.rhat)
            .fold(
                f64::NEG_INFINITY,
                |a, b| if b.is_nan() { a } else { a.max(b) },
            );
        let min_ess_bulk = params
            .iter()
            .map(|p| p.ess_bulk)
            .fold(f64::INFINITY, f64::min);
        Diagnostics {
            params,
            max_rhat,
            min_ess_bulk,
            divergences: self.chains.iter().map(|c| c.divergences()).collect(),
            step_sizes: self.chains.iter().map(|c| c.step_size).collect(),
            max_treedepth_hits: self
                .chains
                .iter()
                .map(|c| {
                    c.stats
                        .iter()
                        .filter(|s| s.treedepth >= max_treedepth)
                        .count()
                })
                .collect(),
        }
    }
}

/// Per-chain generator: one seed, one independent stream per chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn find_initial_point<T: LogDensity>(target: &T, rng: &mut ChaCha8Rng) -> Result<Point> {
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q = target.initial_point(rng);
        let z = Point::new(target, q);
        if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            return Ok(z);
        }
    }
    Err(Error::Initialization(format!(
        "no finite starting point in {MAX_INIT_ATTEMPTS} attempts"
    )))
}

fn run_chain<T: LogDensity>(target: &T, cfg: &SamplerConfig, chain: usize) -> Result<ChainDraws> {
    let mut rng = chain_rng(cfg.seed, chain);
    let mut z = find_initial_point(target, &mut rng)?;
    let dim = target.dim();
    let mut integ = Integrator {
        target,
        inv_metric: target.initial_inv_metric(),
        step: 1.0,
    };
    integ.heuristic_step(&z, &mut rng);
    let mut da = DualAveraging::new(cfg.target_accept, integ.step);
    let mut windows = WindowSchedule::new(cfg.warmup);
    let mut var = Welford::new(dim);

    let transition = |integ: &Integrator<T>, z: &Point, rng: &mut ChaCha8Rng| match cfg.algorithm {
        Algorithm::Nuts => integ.nuts(z, cfg.max_treedepth, rng),
        Algorithm::Static => integ.static_hmc(z, cfg.leapfrog_steps, rng),
    };

    let mut warmup_leapfrogs = 0;
    for it in 0..cfg.warmup {
        let (next, stats) = transition(&integ, &z, &mut rng);
        z = next;
        warmup_leapfrogs += stats.n_leapfrog;
        log::trace!(
            "chain {chain} warmup {it}: {} leapfrogs, step {:.3e}",
            stats.n_leapfrog,
            integ.step
        );
        integ.step = da.update(stats.accept_stat);
        if windows.in_window(it) {
            var.add(&z.q);
        }
        if windows.end_of_window(it) {
            windows.advance(it);
            integ.inv_metric = var.regularized_variance();
            var.reset();
            integ.heuristic_step(&z, &mut rng);
            da.restart(integ.step);
        }
    }
    if cfg.warmup > 0 {
        integ.step = da.final_step();
    }
    log::debug!("chain {chain}: step size {:.4e} after warmup", integ.step);

    let mut draws = Vec::with_capacity(cfg.samples);
    let mut stats = Vec::with_capacity(cfg.samples);
    let mut lp = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let (next, s) = transition(&integ, &z, &mut rng);
        z = next;
        draws.push(target.to_natural(&z.q));
        lp.push(z.logp);
        stats.push(s);
    }
    Ok(ChainDraws {
        draws,
        stats,
        lp,
        step_size: integ.step,
        inv_metric: integ.inv_metric,
        warmup_leapfrogs,
    })
}

/// Runs `cfg.chains` independent chains (in parallel when a thread pool is
/// available). Results depend only on the seed, not on scheduling.
pub fn run_hmc<T: LogDensity>(target: &T, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let chains: Vec<Result<ChainDraws>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect();
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        names: target.param_names(),
        chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent normals with the given means and standard deviations.
    struct Gauss {
        mu: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gauss {
        fn dim(&self) -> usize {
            self.mu.len()
        }
        fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for j in 0..x.len() {
                let z = (x[j] - self.mu[j]) / self.sd[j];
                lp -= 0.5 * z * z;
                g[j] = -z / self.sd[j];
            }
            lp
        }
    }

    fn cfg(algorithm: Algorithm) -> SamplerConfig {
        SamplerConfig {
            chains: 4,
            warmup: 500,
            samples: 1000,
            seed: 11,
            algorithm,
            leapfrog_steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn nuts_recovers_gaussian_moments() {
        let g = Gauss {
            mu: vec![1.0, -2.0, 0.0],
            sd: vec![1.0, 0.1, 10.0],
        };
        let draws = run_hmc(&g, &cfg(Algorithm::Nuts)).unwrap();
        let d = draws.diagnostics(10);
        for (j, p) in d.params.iter().enumerate() {
            assert!((p.mean - g.mu[j]).abs() < 0.1 * g.sd[j], "{p:?}");
            assert!((p.sd / g.sd[j] - 1.0).abs() < 0.1, "{p:?}");
            assert!(p.rhat < 1.01);
        }
        assert_eq!(d.divergences.iter().sum::<usize>(), 0);
    }

    #[test]
    fn static_hmc_recovers_gaussian_moments() {
        let g = Gauss {
            mu: vec![0.5, 3.0],
            sd: vec![2.0, 0.5],
        };
        let d = run_hmc(&g, &cfg(Algorithm::Static))
            .unwrap()
            .diagnostics(10);
        for (j, p) in d.params.iter().enumerate() {
            assert!((p.mean - g.mu[j]).abs() < 0.15 * g.sd[j], "{p:?}");
            assert!((p.sd / g.sd[j] - 1.0).abs() < 0.15, "{p:?}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let g = Gauss {
            mu: vec![0.0; 2],
            sd: vec![1.0; 2],
        };
        let c = SamplerConfig {
            warmup: 50,
            samples: 50,
            ..cfg(Algorithm::Nuts)
        };
        assert_eq!(run_hmc(&g, &c).unwrap(), run_hmc(&g, &c).unwrap());
    }

    #[test]
    fn chains_use_distinct_streams() {
        use rand::Rng;
        let a: f64 = chain_rng(1, 0).random();
        let b: f64 = chain_rng(1, 1).random();
        assert_ne!(a, b);
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn logp_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 0.0;
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn infeasible_target_fails_initialization() {
        assert!(matches!(
            run_hmc(&Nowhere, &cfg(Algorithm::Nuts)),
            Err(Error::Initialization(_))
        ));
    }
}
