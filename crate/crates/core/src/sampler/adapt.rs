//! Warmup adaptation: dual-averaging step size and a windowed diagonal
//! metric estimate.

/// Nesterov dual averaging of `log ε` toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub delta: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(delta: f64, initial_step: f64) -> DualAveraging {
        let mut da = DualAveraging {
            delta,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        da.restart(initial_step);
        da
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size given the last acceptance statistic.
    pub fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = if accept.is_finite() {
            accept.min(1.0)
        } else {
            0.0
        };
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// The averaged step size used after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Welford {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let nf = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / nf;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk toward `1e-3`, as the tuned inverse metric.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.m2.iter_mut().for_each(|m| *m = 0.0);
    }
}

/// Warmup layout: an initial fast buffer, doubling slow windows that estimate
/// the metric, and a terminal fast buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    enabled: bool,
}

impl WindowSchedule {
    pub fn new(warmup: usize) -> WindowSchedule {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        let enabled = warmup >= 20;
        if enabled && init + base + term > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        WindowSchedule {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: init + base - 1,
            enabled,
        }
    }

    pub fn in_window(&self, it: usize) -> bool {
        self.enabled
            && it >= self.init_buffer
            && it + self.term_buffer < self.warmup
            && it != self.warmup
    }

    pub fn end_of_window(&self, it: usize) -> bool {
        self.enabled && it == self.next_window && it != self.warmup
    }

    pub fn advance(&mut self, it: usize) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = it + self.window_size;
        if self.next_window != last
            && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer
        {
            self.next_window = last;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(0.8, 1.0);
        let low = da.update(0.1);
        let mut da2 = DualAveraging::new(0.8, 1.0);
        let high = da2.update(1.0);
        assert!(low < high);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [[1.0, 2.0], [3.0, 5.0], [4.0, -1.0], [0.5, 0.0]];
        let mut w = Welford::new(2);
        xs.iter().for_each(|x| w.add(x));
        let v = w.regularized_variance();
        let m0 = 8.5 / 4.0;
        let var0: f64 = xs.iter().map(|x| (x[0] - m0) * (x[0] - m0)).sum::<f64>() / 3.0;
        assert!((v[0] - (4.0 / 9.0 * var0 + 1e-3 * 5.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn default_windows_cover_slow_phase() {
        let mut s = WindowSchedule::new(1000);
        let mut ends = vec![];
        for it in 0..1000 {
            if s.end_of_window(it) {
                ends.push(it);
                s.advance(it);
            }
        }
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
        assert!(!s.in_window(74) && s.in_window(75) && s.in_window(949) && !s.in_window(950));
    }

    #[test]
    fn short_warmup_uses_proportional_buffers() {
        let mut s = WindowSchedule::new(100);
        let mut ends = vec![];
        for it in 0..100 {
            if s.end_of_window(it) {
                ends.push(it);
                s.advance(it);
            }
        }
        assert_eq!(ends, vec![89]);
    }
}
