//! Posterior summaries and rank-normalized convergence diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// One entry per parameter followed by one for `lp`.
    pub params: Vec<ParamSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn summarize_column(name: &str, xs: &[f64]) -> ParamSummary {
    let s = stats::sorted(xs);
    ParamSummary {
        name: name.to_string(),
        mean: stats::mean(xs),
        sd: stats::std_dev(xs),
        q025: stats::quantile_sorted(&s, 0.025),
        median: stats::quantile_sorted(&s, 0.5),
        q975: stats::quantile_sorted(&s, 0.975),
    }
}

/// Mean, sd and 2.5/50/97.5% quantiles of each parameter and of `lp`,
/// pooled over chains.
pub fn summarize(draws: &PosteriorDraws) -> PosteriorSummary {
    let mut params: Vec<ParamSummary> = (0..draws.n_params())
        .map(|k| summarize_column(&draws.names[k], &draws.column(k)))
        .collect();
    params.push(summarize_column("lp", &draws.log_post));
    PosteriorSummary { params }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    /// `None` with fewer than two chains.
    pub rhat: Option<f64>,
    pub ess_bulk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostics>,
    pub divergences: usize,
    pub divergent_fraction: f64,
}

impl Diagnostics {
    pub fn get(&self, name: &str) -> Option<&ParamDiagnostics> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).reduce(f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.params.iter().map(|p| p.ess_bulk).fold(f64::INFINITY, f64::min)
    }
}

/// Split-R̂ and bulk ESS for every parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> Diagnostics {
    let params = (0..draws.n_params())
        .map(|k| {
            let chains = draws.chains_of(k);
            ParamDiagnostics {
                name: draws.names[k].clone(),
                rhat: split_rhat(&chains),
                ess_bulk: bulk_ess(&chains),
            }
        })
        .collect();
    Diagnostics {
        params,
        divergences: draws.divergent.iter().filter(|&&d| d).count(),
        divergent_fraction: draws.divergent_fraction(),
    }
}

/// Halves every chain, dropping the middle draw of odd-length chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces each value by the normal quantile of its fractional rank
/// (average ranks for ties) over all chains.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = all.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| all[a].total_cmp(&all[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && all[order[j + 1]] == all[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut k = 0;
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| {
                    let z = normal.inverse_cdf((ranks[k] - 0.375) / (s as f64 + 0.25));
                    k += 1;
                    z
                })
                .collect()
        })
        .collect()
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let w = stats::mean(&chains.iter().map(|c| stats::variance(c)).collect::<Vec<_>>());
    let b = n * stats::variance(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split-R̂: the larger of the bulk and folded (tail)
/// versions. `None` for fewer than two chains or chains shorter than four.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 || chains.iter().any(|c| c.len() < 4) {
        return None;
    }
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    let med = stats::quantile_sorted(&stats::sorted(&all), 0.5);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    Some(bulk.max(tail))
}

/// Mean-centred copy of each chain.
fn centred(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    chains
        .iter()
        .map(|c| {
            let m = stats::mean(c);
            c.iter().map(|v| v - m).collect()
        })
        .collect()
}

/// Autocovariance of a centred series at one lag, with divisor `n`.
fn autocovariance(d: &[f64], lag: usize) -> f64 {
    let n = d.len();
    d[..n - lag].iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Effective sample size of already-split chains of equal length, using
/// Geyer's initial monotone sequence estimator.
fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 4 {
        return total;
    }
    let d = centred(chains);
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let nf = n as f64;
    let mean_var = d.iter().map(|c| autocovariance(c, 0)).sum::<f64>() / m as f64 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += stats::variance(&means);
    }
    if !(var_plus > 0.0) {
        return total;
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = d.iter().map(|c| autocovariance(c, t)).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho(1);
    rho_hat[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho(t + 1);
        rho_odd = rho(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho_hat[t + 1] = rho_even;
            rho_hat[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho_hat[max_t + 1] = rho_even;
    }
    // Initial monotone sequence: pair sums may not increase.
    let mut t = 1;
    while t + 4 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let tau = -1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + rho_hat[max_t + 1];
    let tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size: ESS of the rank-normalized split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) {
        return chains.iter().map(|c| c.len()).sum::<usize>() as f64;
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let equal: Vec<Vec<f64>> = chains.iter().map(|c| c[..len].to_vec()).collect();
    let split = split_chains(&equal);
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    if all.iter().all(|v| *v == all[0]) {
        return all.len() as f64;
    }
    ess(&rank_normalize(&split))
}
