//! Hamiltonian transitions with a diagonal metric: multinomial NUTS with the
//! generalized U-turn criterion, and fixed-length HMC.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LogDensity;
use crate::numeric::log_sum_exp;

/// Energy error beyond which a trajectory counts as divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn new(target: &impl LogDensity, q: Vec<f64>) -> Point {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        Point {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        }
    }
}

/// Per-transition statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub treedepth: usize,
    pub divergent: bool,
    pub energy: f64,
}

pub struct Integrator<'a, T: LogDensity> {
    pub target: &'a T,
    pub inv_metric: Vec<f64>,
    pub step: f64,
}

impl<T: LogDensity> Integrator<'_, T> {
    pub fn hamiltonian(&self, z: &Point) -> f64 {
        let k: f64 =
            z.p.iter()
                .zip(&self.inv_metric)
                .map(|(p, m)| p * p * m)
                .sum();
        let h = -z.logp + 0.5 * k;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    pub fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    pub fn sample_momentum(&self, z: &mut Point, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let e: f64 = StandardNormal.sample(rng);
            *p = e / m.sqrt();
        }
    }

    pub fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.logp_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubles or halves the step until one leapfrog step crosses an
    /// acceptance probability of 0.8.
    pub fn heuristic_step(&mut self, z0: &Point, rng: &mut ChaCha8Rng) {
        let threshold = 0.8f64.ln();
        let probe = |s: &Self, rng: &mut ChaCha8Rng| {
            let mut z = z0.clone();
            s.sample_momentum(&mut z, rng);
            let h0 = s.hamiltonian(&z);
            s.leapfrog(&mut z, s.step);
            h0 - s.hamiltonian(&z)
        };
        let direction = if probe(self, rng) > threshold { 1 } else { -1 };
        for _ in 0..100 {
            let dh = probe(self, rng);
            if (direction == 1 && !(dh > threshold)) || (direction == -1 && !(dh < threshold)) {
                break;
            }
            self.step = if direction == 1 {
                self.step * 2.0
            } else {
                self.step * 0.5
            };
            if self.step > 1e7 || self.step < 1e-12 {
                break;
            }
        }
        self.step = self.step.clamp(1e-12, 1e7);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct TreeState {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    h0: f64,
}

impl<T: LogDensity> Integrator<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
        st: &mut TreeState,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        let dim = z.q.len();
        if depth == 0 {
            self.leapfrog(z, sign * self.step);
            st.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - st.h0 > MAX_DELTA_H {
                st.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, st.h0 - h);
            st.sum_metro_prob += if st.h0 - h > 0.0 {
                1.0
            } else {
                (st.h0 - h).exp()
            };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_beg.clone_from(&z.p);
            add_assign(rho, &z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            p_end.clone_from(p_beg);
            return !st.divergent;
        }

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
            st,
            rng,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
            st,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree = add(&rho_init, &rho_final);
        add_assign(rho, &rho_subtree);
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = add(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    /// One NUTS transition from `z0`.
    pub fn nuts(
        &self,
        z0: &Point,
        max_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Point, TransitionStats) {
        let mut z = z0.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        let mut st = TreeState {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
            h0,
        };

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp0 = self.p_sharp(&z.p);
        let (mut p_fwd_fwd, mut p_sharp_fwd_fwd) = (z.p.clone(), p_sharp0.clone());
        let (mut p_fwd_bck, mut p_sharp_fwd_bck) = (z.p.clone(), p_sharp0.clone());
        let (mut p_bck_fwd, mut p_sharp_bck_fwd) = (z.p.clone(), p_sharp0.clone());
        let (mut p_bck_bck, mut p_sharp_bck_bck) = (z.p.clone(), p_sharp0);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let dim = z.q.len();

        while depth < max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if rng.random::<f64>() > 0.5 {
                // Extend forward from the forward end.
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                valid = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    1.0,
                    &mut lsw_subtree,
                    &mut st,
                    rng,
                );
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                valid = self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    -1.0,
                    &mut lsw_subtree,
                    &mut st,
                    rng,
                );
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight
                || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp()
            {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = add(&rho_bck, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = add(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        let energy = self.hamiltonian(&z_sample);
        let stats = TransitionStats {
            accept_stat: if st.n_leapfrog > 0 {
                st.sum_metro_prob / st.n_leapfrog as f64
            } else {
                0.0
            },
            n_leapfrog: st.n_leapfrog,
            treedepth: depth,
            divergent: st.divergent,
            energy,
        };
        (z_sample, stats)
    }

    /// One Metropolis-corrected transition of `steps` leapfrog steps.
    pub fn static_hmc(
        &self,
        z0: &Point,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Point, TransitionStats) {
        let mut z = z0.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        let mut divergent = false;
        let mut n = 0;
        for _ in 0..steps {
            self.leapfrog(&mut z, self.step);
            n += 1;
            if self.hamiltonian(&z) - h0 > MAX_DELTA_H {
                divergent = true;
                break;
            }
        }
        let h = self.hamiltonian(&z);
        let accept = if divergent {
            0.0
        } else {
            (h0 - h).exp().min(1.0)
        };
        let next = if !divergent && rng.random::<f64>() < accept {
            z
        } else {
            z0.clone()
        };
        let energy = self.hamiltonian(&next);
        (
            next,
            TransitionStats {
                accept_stat: accept,
                n_leapfrog: n,
                treedepth: 0,
                divergent,
                energy,
            },
        )
    }
}
