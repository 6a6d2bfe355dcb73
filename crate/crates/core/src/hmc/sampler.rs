//! Static-trajectory HMC with a jittered number of leapfrog steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{DualAveraging, Welford};
use crate::error::{Error, Result};
use crate::posterior::LogDensity;

/// Energy error beyond which a transition is flagged divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub seed: u64,
    /// Mean integration time per transition in metric-scaled units.
    pub trajectory_length: f64,
    /// Standard deviation of the start jitter around the initial point.
    pub init_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            target_accept: 0.8,
            max_leapfrog: 1024,
            seed: 0,
            trajectory_length: 1.0,
            init_jitter: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup == 0 || self.draws == 0 || self.max_leapfrog == 0 {
            return Err(Error::Validation("chain, warmup, draw and leapfrog counts must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Validation(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(self.trajectory_length > 0.0 && self.trajectory_length.is_finite()) {
            return Err(Error::Validation("trajectory length must be > 0".into()));
        }
        Ok(())
    }

    /// Warmup iterations in each of the three adaptation windows.
    pub fn warmup_windows(&self) -> (usize, usize, usize) {
        let w = self.warmup;
        let first = ((0.15 * w as f64).round() as usize).min(w);
        let second = ((0.60 * w as f64).round() as usize).min(w - first);
        (first, second, w - first - second)
    }

    fn max_steps_for(&self, step_size: f64) -> usize {
        let l = (2.0 * self.trajectory_length / step_size).ceil();
        if l.is_finite() {
            (l as usize).clamp(1, self.max_leapfrog)
        } else {
            self.max_leapfrog
        }
    }
}

/// Per-chain sampler state and tuning results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub max_leapfrog: usize,
    pub accept_rate: f64,
    pub divergences: usize,
    pub mean_leapfrog: f64,
}

/// Post-warmup output of one chain, on the unconstrained scale.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub positions: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub stats: ChainStats,
}

/// Leapfrog integration of `steps` steps. `grad` must hold the gradient at
/// `q` on entry and holds it at the final point on exit. Returns the log
/// density at the final point.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    step_size: f64,
    inv_mass: &[f64],
    steps: usize,
) -> Result<f64> {
    let mut logp = f64::NAN;
    for _ in 0..steps {
        for k in 0..q.len() {
            p[k] += 0.5 * step_size * grad[k];
            q[k] += step_size * inv_mass[k] * p[k];
        }
        logp = target.log_density_grad(q, grad)?;
        for k in 0..q.len() {
            p[k] += 0.5 * step_size * grad[k];
        }
    }
    Ok(logp)
}

pub fn kinetic_energy(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pk, m)| pk * pk * m).sum::<f64>()
}

struct Transition {
    accept_stat: f64,
    divergent: bool,
    steps: usize,
}

struct Chain<'t, T: ?Sized> {
    target: &'t T,
    rng: ChaCha8Rng,
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    inv_mass: Vec<f64>,
    step_size: f64,
}

impl<T: LogDensity + ?Sized> Chain<'_, T> {
    fn draw_momentum(&mut self) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|m| {
                let z: f64 = self.rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }

    fn transition(&mut self, max_steps: usize) -> Transition {
        let steps = self.rng.random_range(1..=max_steps);
        let mut p = self.draw_momentum();
        let h0 = -self.logp + kinetic_energy(&p, &self.inv_mass);
        let mut q = self.q.clone();
        let mut grad = self.grad.clone();
        let proposal = leapfrog(self.target, &mut q, &mut p, &mut grad, self.step_size, &self.inv_mass, steps);
        let u: f64 = self.rng.random();
        let Ok(logp) = proposal else {
            return Transition { accept_stat: 0.0, divergent: true, steps };
        };
        let delta = -logp + kinetic_energy(&p, &self.inv_mass) - h0;
        if !delta.is_finite() || delta.abs() > DIVERGENCE_THRESHOLD {
            return Transition { accept_stat: 0.0, divergent: true, steps };
        }
        let accept_stat = (-delta).exp().min(1.0);
        if u < accept_stat {
            self.q = q;
            self.grad = grad;
            self.logp = logp;
        }
        Transition { accept_stat, divergent: false, steps }
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance probability of one half.
    fn init_step_size(&mut self) {
        let mut eps = self.step_size;
        let accept = |chain: &mut Self, eps: f64| -> f64 {
            let mut p = chain.draw_momentum();
            let h0 = -chain.logp + kinetic_energy(&p, &chain.inv_mass);
            let mut q = chain.q.clone();
            let mut g = chain.grad.clone();
            match leapfrog(chain.target, &mut q, &mut p, &mut g, eps, &chain.inv_mass, 1) {
                Ok(lp) => {
                    let d = -lp + kinetic_energy(&p, &chain.inv_mass) - h0;
                    if d.is_finite() { (-d).exp().min(1.0) } else { 0.0 }
                }
                Err(_) => 0.0,
            }
        };
        let a0 = accept(self, eps);
        let direction = if a0 > 0.5 { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let a = accept(self, eps);
            if (direction > 0.0 && a <= 0.5) || (direction < 0.0 && a > 0.5) {
                break;
            }
            let next = if direction > 0.0 { eps * 2.0 } else { eps * 0.5 };
            if !(1e-12..=1e6).contains(&next) {
                break;
            }
            eps = next;
        }
        self.step_size = eps;
    }
}

/// Runs one chain from `init`: warmup adaptation then `config.draws`
/// retained transitions. Randomness comes from a ChaCha stream keyed by
/// `(config.seed, chain)`.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    config: &HmcConfig,
    chain: usize,
) -> Result<ChainOutput> {
    config.validate()?;
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let mut grad = vec![0.0; dim];
    let logp = target
        .log_density_grad(init, &mut grad)
        .map_err(|e| Error::numerical(format!("chain {chain} cannot start: {e}"), None))?;
    let mut state = Chain {
        target,
        rng,
        q: init.to_vec(),
        grad,
        logp,
        inv_mass: vec![1.0; dim],
        step_size: 0.1,
    };

    let (w1, w2, w3) = config.warmup_windows();
    state.init_step_size();
    let mut da = DualAveraging::new(state.step_size, config.target_accept);
    let mut welford = Welford::new(dim);
    for it in 0..(w1 + w2 + w3) {
        let t = state.transition(config.max_steps_for(state.step_size));
        state.step_size = da.update(t.accept_stat);
        if it >= w1 && it < w1 + w2 {
            welford.push(&state.q);
            if it + 1 == w1 + w2 && welford.count() >= 10 {
                state.inv_mass = welford.regularized_variance();
                state.init_step_size();
                da = DualAveraging::new(state.step_size, config.target_accept);
            }
        }
    }
    state.step_size = da.final_step();
    let max_steps = config.max_steps_for(state.step_size);

    let mut positions = Vec::with_capacity(config.draws);
    let mut log_density = Vec::with_capacity(config.draws);
    let mut divergent = Vec::with_capacity(config.draws);
    let (mut accept_sum, mut steps_sum) = (0.0, 0usize);
    for _ in 0..config.draws {
        let t = state.transition(max_steps);
        accept_sum += t.accept_stat;
        steps_sum += t.steps;
        positions.push(state.q.clone());
        log_density.push(state.logp);
        divergent.push(t.divergent);
    }
    let n = config.draws as f64;
    let divergences = divergent.iter().filter(|&&d| d).count();
    Ok(ChainOutput {
        positions,
        log_density,
        divergent,
        stats: ChainStats {
            step_size: state.step_size,
            inv_mass: state.inv_mass,
            max_leapfrog: max_steps,
            accept_rate: accept_sum / n,
            divergences,
            mean_leapfrog: steps_sum as f64 / n,
        },
    })
}

/// Runs one chain per entry of `inits` in parallel; output is ordered by
/// chain index.
pub fn run_chains<T: LogDensity + ?Sized>(
    target: &T,
    inits: &[Vec<f64>],
    config: &HmcConfig,
) -> Result<Vec<ChainOutput>> {
    inits
        .par_iter()
        .enumerate()
        .map(|(c, init)| run_chain(target, init, config, c))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
