//! Posterior-mode (MAP) estimation of the static Nelson-Siegel parameters.

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::NsParams;
use crate::error::{Error, Result};
use crate::optim::{maximize, BfgsOptions};
use crate::panel::YieldPanel;
use crate::posterior::{constrain, unconstrain, Posterior, PriorModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Total number of starts; the first is the unjittered initial point.
    pub restarts: usize,
    /// Standard deviation of the restart jitter on the unconstrained scale.
    pub jitter_sd: f64,
    pub seed: u64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            restarts: 8,
            jitter_sd: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub model: PriorModel,
    pub params: NsParams,
    /// Mode on the unconstrained scale.
    pub z: Vec<f64>,
    /// Natural-scale log posterior (likelihood + prior) at the mode.
    pub log_post: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Which start produced this result.
    pub restart: usize,
}

/// Curve-fitting start: level from the longest maturity, slope from the
/// short-long spread, zero curvature, `λ = 1`, `σ` from the residuals.
///
/// Under Model 1 the betas are floored at 0.1 so the start lies inside the
/// positive support.
pub fn default_init(model: PriorModel, panel: &YieldPanel) -> Result<NsParams> {
    let (short, long) = panel
        .short_long_means()
        .ok_or_else(|| Error::Validation("panel has no observations".into()))?;
    let mut betas = [long, short - long, 0.0];
    if !model.is_hierarchical() {
        for b in &mut betas {
            *b = b.max(0.1);
        }
    }
    let mut params = NsParams::new(betas[0], betas[1], betas[2], 1.0, 1.0);
    let resid: Vec<f64> = panel
        .observations()
        .map(|(_, tau, y)| y - params.yield_at(tau))
        .collect();
    params.sigma = crate::stats::std_dev(&resid).max(1e-3);
    if model.is_hierarchical() {
        let rms = (betas.iter().map(|b| b * b).sum::<f64>() / 3.0).sqrt();
        params.sigma_beta = Some(rms.max(0.1));
    }
    Ok(params)
}

/// Maximises the posterior density of `model` on `panel` by BFGS on the
/// unconstrained coordinates, from `init` (or [`default_init`]) and
/// `options.restarts - 1` jittered copies. Returns the best start; when no
/// start converges the best one travels in the [`Error::Convergence`].
pub fn fit_map(
    model: PriorModel,
    panel: &YieldPanel,
    init: Option<&NsParams>,
    options: &MapOptions,
) -> Result<MapResult> {
    let init = match init {
        Some(p) => *p,
        None => default_init(model, panel)?,
    };
    let z0 = unconstrain(model, &init)?.0;
    let objective = Posterior::mode_objective(model, panel);
    let bfgs = BfgsOptions {
        max_iters: options.max_iters,
        grad_tol: options.grad_tol,
        ..BfgsOptions::default()
    };
    let jitter = Normal::new(0.0, options.jitter_sd.max(0.0))
        .map_err(|e| Error::Domain(format!("jitter sd: {e}")))?;

    let starts: Vec<Vec<f64>> = (0..options.restarts.max(1))
        .map(|k| {
            if k == 0 {
                return z0.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(k as u64);
            z0.iter().map(|v| v + jitter.sample(&mut rng)).collect()
        })
        .collect();

    let outcomes: Vec<Option<MapResult>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, start)| {
            let out = maximize(|z| objective.evaluate(z), start, &bfgs).ok()?;
            Some(MapResult {
                model,
                params: constrain(model, &out.x),
                z: out.x,
                log_post: out.value,
                converged: out.converged,
                iterations: out.iterations,
                grad_norm: out.grad_norm,
                restart: k,
            })
        })
        .collect();

    let finished: Vec<MapResult> = outcomes.into_iter().flatten().filter(|r| r.log_post.is_finite()).collect();
    let any_converged = finished.iter().any(|r| r.converged);
    let best = finished.into_iter().reduce(|best, r| if ranks_above(&r, &best) { r } else { best });

    if let Some(best) = best {
        if any_converged {
            return Ok(best);
        }
        return Err(Error::Convergence {
            message: format!(
                "no start reached gradient norm {:e} within {} iterations for {model} (best {:e})",
                options.grad_tol, options.max_iters, best.grad_norm
            ),
            best_effort: Some(Box::new(best)),
        });
    }
    Err(Error::Convergence {
        message: format!(
            "all {} starts failed for {model}",
            options.restarts.max(1)
        ),
        best_effort: Some(Box::new(MapResult {
            model,
            params: init,
            z: z0,
            log_post: f64::NAN,
            converged: false,
            iterations: 0,
            grad_norm: f64::NAN,
            restart: 0,
        })),
    })
}

/// Higher log posterior wins, then smaller gradient norm, then earlier start.
fn ranks_above(a: &MapResult, b: &MapResult) -> bool {
    if a.log_post != b.log_post {
        return a.log_post > b.log_post;
    }
    if a.grad_norm != b.grad_norm {
        return a.grad_norm < b.grad_norm;
    }
    a.restart < b.restart
}

/// In-sample root-mean-square error of the fitted curve, in percent.
pub fn fit_rmse(panel: &YieldPanel, params: &NsParams) -> f64 {
    let (ss, n) = panel
        .observations()
        .fold((0.0, 0usize), |(ss, n), (_, tau, y)| {
            let r = y - params.yield_at(tau);
            (ss + r * r, n + 1)
        });
    (ss / n as f64).sqrt()
}

#[derive(Debug)]
pub struct RollingFit {
    pub date: NaiveDate,
    pub result: Result<MapResult>,
}

/// One MAP fit per date of `panel`, each warm-started from the previous
/// successful fit. Failed dates are recorded and the series continues.
pub fn rolling_map(panel: &YieldPanel, model: PriorModel, options: &MapOptions) -> Vec<RollingFit> {
    let mut previous: Option<NsParams> = None;
    let mut out = Vec::with_capacity(panel.n_dates());
    for (i, &date) in panel.dates().iter().enumerate() {
        let day = panel.single_date(i);
        let result = if day.n_observed() == 0 {
            Err(Error::Validation(format!("no observations on {date}")))
        } else {
            fit_map(model, &day, previous.as_ref(), options)
        };
        if let Ok(r) = &result {
            previous = Some(r.params);
        }
        out.push(RollingFit { date, result });
    }
    out
}
