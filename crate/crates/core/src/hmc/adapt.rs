//! Warmup adaptation: dual-averaging step size and a diagonal metric
//! estimated from warmup draws.

/// Dual averaging of the log step size toward a target acceptance rate.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    count: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            count: 0.0,
            h_bar: 0.0,
            log_eps: initial_step.ln(),
            log_eps_bar: 0.0,
        }
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat);
        self.log_eps = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// The averaged iterate, used once adaptation ends.
    pub fn final_step(&self) -> f64 {
        if self.count == 0.0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }
}

/// Running per-coordinate mean and variance (Welford).
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variance shrunk toward `1e-3`, as in Stan's windowed adaptation.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [[1.0, -2.0], [2.5, 0.0], [4.0, 3.0], [-1.0, 1.0]];
        let mut w = Welford::new(2);
        for x in &xs {
            w.push(x);
        }
        let col0: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let var0 = crate::stats::variance(&col0);
        let n = 4.0;
        let expected = (n / (n + 5.0)) * var0 + 1e-3 * 5.0 / (n + 5.0);
        assert!((w.regularized_variance()[0] - expected).abs() < 1e-12);
        assert_eq!(w.count(), 4);
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        // Acceptance above target grows the step, below target shrinks it.
        let mut up = DualAveraging::new(0.1, 0.8);
        for _ in 0..50 {
            up.update(1.0);
        }
        assert!(up.final_step() > 0.1);
        let mut down = DualAveraging::new(0.1, 0.8);
        for _ in 0..50 {
            down.update(0.0);
        }
        assert!(down.final_step() < 0.1);
    }
}
