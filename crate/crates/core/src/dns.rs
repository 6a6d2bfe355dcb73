//! Dynamic Nelson-Siegel state-space model: AR(1) factor dynamics observed
//! through the Nelson-Siegel loadings, filtered with a Kalman recursion.
//!
//! ```text
//! β_t = θ0 + Z β_{t-1} + η_t,   η_t ~ N(0, σ²_η I₃)
//! y_t = Φ β_t + W_t + ε_t,      W_t ~ N(0, K), ε_t ~ N(0, σ²_ε I_m)
//! ```
//!
//! Missing yields are dropped from the observation equation at their date.

use chrono::{Days, NaiveDate};
use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{dns_loadings, loading_row, MaturityGrid};
use crate::error::{Error, Result};
use crate::optim::{maximize, BfgsOptions};
use crate::panel::YieldPanel;

/// Largest condition number accepted for an innovation covariance.
pub const MAX_CONDITION: f64 = 1e12;

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Static parameters of the factor dynamics. `lambda` is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DnsParams {
    pub theta0: Vector3<f64>,
    /// Diagonal of the transition matrix `Z`.
    pub z: Vector3<f64>,
    pub sigma_eps2: f64,
    pub sigma_eta2: f64,
    pub lambda: f64,
}

impl DnsParams {
    pub fn new(theta0: [f64; 3], z: [f64; 3], sigma_eps2: f64, sigma_eta2: f64, lambda: f64) -> Self {
        Self {
            theta0: Vector3::from(theta0),
            z: Vector3::from(z),
            sigma_eps2,
            sigma_eta2,
            lambda,
        }
    }

    /// Variances may be zero (degenerate noiseless systems).
    pub fn validate(&self) -> Result<()> {
        if self.theta0.iter().chain(self.z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("theta0 and Z must be finite".into()));
        }
        for (name, v) in [("sigma_eps2", self.sigma_eps2), ("sigma_eta2", self.sigma_eta2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn z_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.z)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn is_stationary(&self) -> bool {
        self.z.iter().all(|v| v.abs() < 1.0)
    }

    /// `θ0_i / (1 - θ1_i)` when every factor is stationary.
    pub fn stationary_mean(&self) -> Option<Vector3<f64>> {
        self.is_stationary()
            .then(|| Vector3::from_fn(|i, _| self.theta0[i] / (1.0 - self.z[i])))
    }
}

/// Gaussian belief about the factors `(level, slope, curvature)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DnsState {
    pub beta_hat: Vector3<f64>,
    pub sigma: Matrix3<f64>,
}

impl DnsState {
    pub fn new(beta_hat: [f64; 3], sigma: Matrix3<f64>) -> Self {
        Self {
            beta_hat: Vector3::from(beta_hat),
            sigma,
        }
    }

    /// Level from the mean long yield, slope from the mean short-long spread,
    /// zero curvature, covariance `25·I`.
    pub fn diffuse(panel: &YieldPanel) -> Result<Self> {
        let (short, long) = panel
            .short_long_means()
            .ok_or_else(|| Error::Validation("panel has no observations".into()))?;
        Ok(Self::new([long, short - long, 0.0], Matrix3::from_diagonal_element(25.0)))
    }

    /// Standard deviations of the three factors.
    pub fn sd(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.sigma[(i, i)].max(0.0).sqrt())
    }
}

/// Covariance of the cross-maturity observation error `W_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum GpKernel {
    #[default]
    None,
    /// `a²·exp(-(τ-τ')²/(2ℓ²))`.
    SquaredExponential { amplitude2: f64, length_scale: f64 },
}

impl GpKernel {
    /// Squared-exponential kernel with `a² = 0.01`, `ℓ = 2` years.
    pub fn default_squared_exponential() -> Self {
        GpKernel::SquaredExponential {
            amplitude2: 0.01,
            length_scale: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GpKernel::None => Ok(()),
            GpKernel::SquaredExponential { amplitude2, length_scale } => {
                if !(amplitude2.is_finite() && amplitude2 >= 0.0) {
                    return Err(Error::Domain(format!("kernel amplitude² must be >= 0, got {amplitude2}")));
                }
                if !(length_scale.is_finite() && length_scale > 0.0) {
                    return Err(Error::Domain(format!("kernel length scale must be > 0, got {length_scale}")));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t1: f64, t2: f64) -> f64 {
        match *self {
            GpKernel::None => 0.0,
            GpKernel::SquaredExponential { amplitude2, length_scale } => {
                let d = t1 - t2;
                amplitude2 * (-d * d / (2.0 * length_scale * length_scale)).exp()
            }
        }
    }

    pub fn matrix(&self, taus: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(taus.len(), taus.len(), |i, j| self.eval(taus[i], taus[j]))
    }
}

/// Step 1: `β̂_{t|t-1} = θ0 + Z β̂_{t-1}`, `R_t = Z Σ_{t-1} Zᵀ + σ²_η I`.
pub fn predict_state(params: &DnsParams, state: &DnsState) -> DnsState {
    let z = params.z_matrix();
    DnsState {
        beta_hat: params.theta0 + z * state.beta_hat,
        sigma: z * state.sigma * z.transpose() + Matrix3::from_diagonal_element(params.sigma_eta2),
    }
}

/// Result of conditioning one predicted state on one observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DnsUpdate {
    pub state: DnsState,
    /// Innovation per tenor; `None` where the yield is missing.
    pub innovation: Vec<Option<f64>>,
    /// Innovation variance per tenor (diagonal of `S_t`).
    pub innovation_var: Vec<Option<f64>>,
    /// Log density of the observed yields under the prediction.
    pub log_density: f64,
    /// Largest `|Σ - Σᵀ|` entry before symmetrization.
    pub asymmetry: f64,
    /// Diagonal jitter added to `S_t` to factorize it.
    pub jitter: f64,
}

/// Symmetric positive-definite factorization of `s`, escalating diagonal
/// jitter until its condition number is at most [`MAX_CONDITION`].
fn factorize(s: &DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("innovation covariance is not finite", None));
    }
    let n = s.nrows();
    let mut last_cond = f64::INFINITY;
    for &jitter in &JITTERS {
        let sj = s + DMatrix::<f64>::identity(n, n) * jitter;
        let eig = SymmetricEigen::new(sj.clone()).eigenvalues;
        let lo = eig.min();
        let hi = eig.max();
        if lo > 0.0 {
            last_cond = hi / lo;
            if last_cond <= MAX_CONDITION {
                if let Some(chol) = Cholesky::new(sj) {
                    return Ok((chol, jitter));
                }
            }
        }
    }
    Err(Error::numerical(
        format!("innovation covariance is singular or indefinite (condition number {last_cond:.3e})"),
        None,
    ))
}

/// Step 2: conditions the predicted state on `y` (length m, `None` for
/// missing) with innovation covariance `S_t = Φ R_t Φᵀ + K + σ²_ε I`.
pub fn update_state(
    params: &DnsParams,
    predicted: &DnsState,
    y: &[Option<f64>],
    grid: &MaturityGrid,
    kernel: &GpKernel,
) -> Result<DnsUpdate> {
    let taus = grid.taus();
    if y.len() != taus.len() {
        return Err(Error::Validation(format!("{} yields for {} tenors", y.len(), taus.len())));
    }
    let obs: Vec<usize> = (0..y.len()).filter(|&j| y[j].is_some_and(f64::is_finite)).collect();
    let mut innovation = vec![None; y.len()];
    let mut innovation_var = vec![None; y.len()];
    if obs.is_empty() {
        return Ok(DnsUpdate {
            state: *predicted,
            innovation,
            innovation_var,
            log_density: 0.0,
            asymmetry: 0.0,
            jitter: 0.0,
        });
    }
    let m = obs.len();
    let obs_taus: Vec<f64> = obs.iter().map(|&j| taus[j]).collect();
    if !(params.lambda.is_finite() && params.lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {}", params.lambda)));
    }
    let phi = DMatrix::from_fn(m, 3, |r, c| loading_row(params.lambda, obs_taus[r])[c]);
    let r = DMatrix::from_iterator(3, 3, predicted.sigma.iter().copied());
    let k_tilde = kernel.matrix(&obs_taus) + DMatrix::<f64>::identity(m, m) * params.sigma_eps2;
    let phi_r = &phi * &r;
    let s = &phi_r * phi.transpose() + k_tilde;
    let (chol, jitter) = factorize(&s)?;

    let beta_pred = DVector::from_iterator(3, predicted.beta_hat.iter().copied());
    let y_obs = DVector::from_iterator(m, obs.iter().map(|&j| y[j].unwrap_or(f64::NAN)));
    let e = &y_obs - &phi * &beta_pred;
    // S⁻¹ Φ R; the gain is its transpose because R and S are symmetric.
    let s_inv_phi_r = chol.solve(&phi_r);
    let s_inv_e = chol.solve(&e);
    let beta = &beta_pred + phi_r.transpose() * &s_inv_e;
    let sigma_raw = &r - phi_r.transpose() * &s_inv_phi_r;
    let asymmetry = (&sigma_raw - sigma_raw.transpose()).amax();
    let sigma = clip_psd(Matrix3::from_fn(|i, j| 0.5 * (sigma_raw[(i, j)] + sigma_raw[(j, i)])));

    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_density = -0.5 * (log_det + m as f64 * (2.0 * std::f64::consts::PI).ln() + e.dot(&s_inv_e));
    for (k, &j) in obs.iter().enumerate() {
        innovation[j] = Some(e[k]);
        innovation_var[j] = Some(s[(k, k)] + jitter);
    }
    Ok(DnsUpdate {
        state: DnsState {
            beta_hat: Vector3::new(beta[0], beta[1], beta[2]),
            sigma,
        },
        innovation,
        innovation_var,
        log_density,
        asymmetry,
        jitter,
    })
}

/// Replaces negative eigenvalues of a symmetric matrix with zero.
fn clip_psd(sigma: Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(sigma);
    if eig.eigenvalues.min() >= 0.0 {
        return sigma;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = eig.eigenvectors;
    let out = v * Matrix3::from_diagonal(&clipped) * v.transpose();
    0.5 * (out + out.transpose())
}

/// Plug-in yield forecast `φ(τ*)·β̂` and its variance
/// `φ(τ*) Σ φ(τ*)ᵀ + σ²_ε`.
pub fn predict_yield(state: &DnsState, lambda: f64, tau_star: f64, sigma_eps2: f64) -> Result<(f64, f64)> {
    if !(tau_star.is_finite() && tau_star > 0.0) {
        return Err(Error::Domain(format!("maturity must be > 0, got {tau_star}")));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    let phi = loading_row(lambda, tau_star);
    let mean = (phi * state.beta_hat)[0];
    let var = (phi * state.sigma * phi.transpose())[0] + sigma_eps2;
    Ok((mean, var))
}

/// Full forward pass of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// One-step-ahead predictions `β_t | y_{1..t-1}`.
    pub predicted: Vec<DnsState>,
    /// Filtered states `β_t | y_{1..t}`.
    pub filtered: Vec<DnsState>,
    pub innovations: Vec<Vec<Option<f64>>>,
    pub innovation_vars: Vec<Vec<Option<f64>>>,
    pub log_likelihood: f64,
}

/// Runs the Kalman recursion over every date of `panel` from `init`, the
/// belief about `β_0`. Numerical failures carry the date index.
pub fn filter(params: &DnsParams, panel: &YieldPanel, init: &DnsState, kernel: &GpKernel) -> Result<FilterOutput> {
    params.validate()?;
    kernel.validate()?;
    let n = panel.n_dates();
    let mut out = FilterOutput {
        predicted: Vec::with_capacity(n),
        filtered: Vec::with_capacity(n),
        innovations: Vec::with_capacity(n),
        innovation_vars: Vec::with_capacity(n),
        log_likelihood: 0.0,
    };
    let mut state = *init;
    for t in 0..n {
        let predicted = predict_state(params, &state);
        let upd = update_state(params, &predicted, &panel.row(t), panel.grid(), kernel).map_err(|e| match e {
            Error::Numerical { message, index: None } => Error::Numerical { message, index: Some(t) },
            other => other,
        })?;
        out.log_likelihood += upd.log_density;
        state = upd.state;
        out.predicted.push(predicted);
        out.filtered.push(upd.state);
        out.innovations.push(upd.innovation);
        out.innovation_vars.push(upd.innovation_var);
    }
    Ok(out)
}

/// Log of the joint density of all observed yields with the states
/// integrated out, accumulated one date at a time.
pub fn marginal_log_likelihood(params: &DnsParams, panel: &YieldPanel, init: &DnsState, kernel: &GpKernel) -> Result<f64> {
    Ok(filter(params, panel, init, kernel)?.log_likelihood)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// `None` where the filter failed numerically.
    pub log_likelihood: Option<f64>,
}

/// Scores every `λ` in `grid` by marginal log-likelihood with the other
/// parameters fixed. Returns the best `λ` (ties go to the smaller) and the
/// scores in grid order.
pub fn grid_search_lambda(
    panel: &YieldPanel,
    params: &DnsParams,
    grid: &[f64],
    init: &DnsState,
    kernel: &GpKernel,
) -> Result<(f64, Vec<LambdaScore>)> {
    check_grid(grid)?;
    let scores: Vec<LambdaScore> = grid
        .par_iter()
        .map(|&lambda| LambdaScore {
            lambda,
            log_likelihood: marginal_log_likelihood(&params.with_lambda(lambda), panel, init, kernel)
                .ok()
                .filter(|v| v.is_finite()),
        })
        .collect();
    select_lambda(scores)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Validation("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Domain(format!("lambda grid entries must be > 0, got {bad}")));
    }
    Ok(())
}

fn select_lambda(scores: Vec<LambdaScore>) -> Result<(f64, Vec<LambdaScore>)> {
    let best = scores
        .iter()
        .filter_map(|s| s.log_likelihood.map(|v| (s.lambda, v)))
        .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
    match best {
        Some((lambda, _)) => Ok((lambda, scores)),
        None => Err(Error::numerical("filter failed at every grid point", None)),
    }
}

/// Profile search: at each `λ` the other parameters come from `estimate`
/// (typically [`two_step_estimate`]) before the filter scores it. Grid
/// points where `estimate` fails score `None`.
pub fn profile_lambda<E>(
    panel: &YieldPanel,
    grid: &[f64],
    init: &DnsState,
    kernel: &GpKernel,
    estimate: E,
) -> Result<(f64, Vec<LambdaScore>)>
where
    E: Fn(&YieldPanel, f64) -> Result<DnsParams> + Sync,
{
    check_grid(grid)?;
    let scores: Vec<LambdaScore> = grid
        .par_iter()
        .map(|&lambda| LambdaScore {
            lambda,
            log_likelihood: estimate(panel, lambda)
                .and_then(|p| marginal_log_likelihood(&p.with_lambda(lambda), panel, init, kernel))
                .ok()
                .filter(|v| v.is_finite()),
        })
        .collect();
    select_lambda(scores)
}

/// Simulated panel and the factor path that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct DnsSimulation {
    pub panel: YieldPanel,
    pub states: Vec<Vector3<f64>>,
}

/// Forward-simulates `t_len` dates starting from the stationary mean, or
/// from `θ0` when some factor is not stationary.
pub fn simulate_dns(params: &DnsParams, grid: &MaturityGrid, t_len: usize, seed: u64, kernel: &GpKernel) -> Result<DnsSimulation> {
    let start = params.stationary_mean().unwrap_or(params.theta0);
    simulate_dns_from(params, grid, t_len, seed, kernel, start)
}

/// As [`simulate_dns`] with an explicit `β_0`. Dates are consecutive days
/// from 2000-01-01.
pub fn simulate_dns_from(
    params: &DnsParams,
    grid: &MaturityGrid,
    t_len: usize,
    seed: u64,
    kernel: &GpKernel,
    start: Vector3<f64>,
) -> Result<DnsSimulation> {
    params.validate()?;
    kernel.validate()?;
    if t_len == 0 {
        return Err(Error::Validation("simulation length must be >= 1".into()));
    }
    let m = grid.len();
    let phi = dns_loadings(params.lambda, grid)?;
    let k = kernel.matrix(grid.taus());
    let k_chol = match kernel {
        GpKernel::None => None,
        _ => Some(factorize(&k).map(|(c, _)| c.l()).or_else(|_| {
            // A zero-amplitude kernel draws nothing.
            if k.amax() == 0.0 { Ok(DMatrix::zeros(m, m)) } else { Err(Error::numerical("kernel matrix is singular", None)) }
        })?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let eta_sd = params.sigma_eta2.sqrt();
    let eps_sd = params.sigma_eps2.sqrt();
    let base = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let mut beta = start;
    let mut states = Vec::with_capacity(t_len);
    let mut rows = Vec::with_capacity(t_len);
    let mut dates = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let eta = Vector3::from_fn(|_, _| eta_sd * normal(&mut rng));
        beta = params.theta0 + params.z_matrix() * beta + eta;
        let mut y = &phi * DVector::from_iterator(3, beta.iter().copied());
        if let Some(l) = &k_chol {
            let w = DVector::from_fn(m, |_, _| normal(&mut rng));
            y += l * w;
        }
        for v in y.iter_mut() {
            *v += eps_sd * normal(&mut rng);
        }
        states.push(beta);
        rows.push(y.iter().copied().collect());
        dates.push(base + Days::new(t as u64));
    }
    Ok(DnsSimulation {
        panel: YieldPanel::from_complete(dates, grid.clone(), rows)?,
        states,
    })
}

/// Diebold-Li two-step estimate at fixed `λ`: per-date least squares for
/// the factors, then a per-factor AR(1) regression. Needs at least three
/// dates with three or more observed tenors.
pub fn two_step_estimate(panel: &YieldPanel, lambda: f64) -> Result<DnsParams> {
    let taus = panel.grid().taus();
    let mut betas: Vec<Vector3<f64>> = Vec::new();
    let mut ssr = 0.0;
    let mut dof = 0usize;
    for t in 0..panel.n_dates() {
        let row = panel.row(t);
        let obs: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_some()).collect();
        if obs.len() < 3 {
            continue;
        }
        let phi = DMatrix::from_fn(obs.len(), 3, |r, c| loading_row(lambda, taus[obs[r]])[c]);
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|&j| row[j].unwrap_or(0.0)));
        let b = phi
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::numerical(format!("least squares failed: {e}"), Some(t)))?;
        ssr += (&y - &phi * &b).norm_squared();
        dof += obs.len().saturating_sub(3);
        betas.push(Vector3::new(b[0], b[1], b[2]));
    }
    if betas.len() < 3 {
        return Err(Error::Validation("two-step estimate needs at least three usable dates".into()));
    }
    let mut theta0 = Vector3::zeros();
    let mut z = Vector3::zeros();
    let mut eta_ss = 0.0;
    for i in 0..3 {
        let x: Vec<f64> = betas[..betas.len() - 1].iter().map(|b| b[i]).collect();
        let y: Vec<f64> = betas[1..].iter().map(|b| b[i]).collect();
        let (mx, my) = (crate::stats::mean(&x), crate::stats::mean(&y));
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = if sxx > 0.0 { (sxy / sxx).clamp(-0.999, 0.999) } else { 0.0 };
        theta0[i] = my - slope * mx;
        z[i] = slope;
        eta_ss += x.iter().zip(&y).map(|(a, b)| (b - theta0[i] - slope * a).powi(2)).sum::<f64>();
    }
    let sigma_eta2 = (eta_ss / (3.0 * (betas.len() - 1) as f64)).max(1e-8);
    let sigma_eps2 = if dof > 0 { (ssr / dof as f64).max(1e-8) } else { 1e-4 };
    Ok(DnsParams {
        theta0,
        z,
        sigma_eps2,
        sigma_eta2,
        lambda,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsFit {
    pub params: DnsParams,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn pack(p: &DnsParams) -> Vec<f64> {
    let mut v: Vec<f64> = p.theta0.iter().chain(p.z.iter()).copied().collect();
    v.push(p.sigma_eps2.max(1e-12).ln());
    v.push(p.sigma_eta2.max(1e-12).ln());
    v
}

fn unpack(v: &[f64], lambda: f64) -> DnsParams {
    DnsParams::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6].exp(), v[7].exp(), lambda)
}

/// Maximum-likelihood estimate of `θ0`, `Z`, `σ²_ε`, `σ²_η` at the fixed
/// `λ` of `start`, by BFGS with central finite-difference gradients. The
/// variances are optimized on the log scale.
pub fn fit_dns_params(
    panel: &YieldPanel,
    start: &DnsParams,
    init: &DnsState,
    kernel: &GpKernel,
    options: &BfgsOptions,
) -> Result<DnsFit> {
    start.validate()?;
    let lambda = start.lambda;
    let f = |v: &[f64]| -> Result<f64> { marginal_log_likelihood(&unpack(v, lambda), panel, init, kernel) };
    let objective = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let value = f(v)?;
        let mut grad = vec![0.0; v.len()];
        let mut x = v.to_vec();
        for k in 0..v.len() {
            let h = 1e-5 * v[k].abs().max(1.0);
            x[k] = v[k] + h;
            let up = f(&x)?;
            x[k] = v[k] - h;
            let down = f(&x)?;
            x[k] = v[k];
            grad[k] = (up - down) / (2.0 * h);
        }
        Ok((value, grad))
    };
    let out = maximize(objective, &pack(start), options)?;
    Ok(DnsFit {
        params: unpack(&out.x, lambda),
        log_likelihood: out.value,
        converged: out.converged,
        iterations: out.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::slope_loading;
    use crate::panel::builtin_fixture_may2018;
    use rand::Rng;

    fn fixture_grid() -> MaturityGrid {
        builtin_fixture_may2018().grid().clone()
    }

    fn stable_params(lambda: f64) -> DnsParams {
        DnsParams::new([0.3, -0.2, 0.15], [0.9, 0.8, 0.7], 0.0025, 0.01, lambda)
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix3::from_diagonal_element(0.1)
    }

    /// Dense log density of the stacked observations with the states
    /// marginalized through the joint covariance.
    fn brute_force_log_lik(params: &DnsParams, panel: &YieldPanel, init: &DnsState, kernel: &GpKernel) -> f64 {
        let t_len = panel.n_dates();
        let m = panel.n_tenors();
        let phi = dns_loadings(params.lambda, panel.grid()).unwrap();
        let z = params.z_matrix();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let (mut mu, mut v) = (init.beta_hat, init.sigma);
        for _ in 0..t_len {
            mu = params.theta0 + z * mu;
            v = z * v * z.transpose() + Matrix3::from_diagonal_element(params.sigma_eta2);
            means.push(mu);
            vars.push(v);
        }
        // Cov(β_t, β_s) = Z^{t-s} V_s for t >= s.
        let state_cov = |t: usize, s: usize| -> Matrix3<f64> {
            let (hi, lo) = if t >= s { (t, s) } else { (s, t) };
            let mut c = vars[lo];
            for _ in lo..hi {
                c = z * c;
            }
            if t >= s { c } else { c.transpose() }
        };
        let n = t_len * m;
        let mut cov = DMatrix::zeros(n, n);
        let mut mean = DVector::zeros(n);
        let noise = kernel.matrix(panel.grid().taus()) + DMatrix::identity(m, m) * params.sigma_eps2;
        for t in 0..t_len {
            let mt = &phi * DVector::from_column_slice(means[t].as_slice());
            mean.rows_mut(t * m, m).copy_from(&mt);
            for s in 0..t_len {
                let c = DMatrix::from_column_slice(3, 3, state_cov(t, s).as_slice());
                let mut block = &phi * c * phi.transpose();
                if t == s {
                    block += &noise;
                }
                cov.view_mut((t * m, s * m), (m, m)).copy_from(&block);
            }
        }
        let y = DVector::from_iterator(n, (0..t_len).flat_map(|t| (0..m).map(move |j| (t, j))).map(|(t, j)| panel.get(t, j).unwrap()));
        let chol = Cholesky::new(cov).unwrap();
        let d = y - mean;
        let quad = d.dot(&chol.solve(&d));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (log_det + n as f64 * (2.0 * std::f64::consts::PI).ln() + quad)
    }

    fn small_instance(kernel: &GpKernel) -> (DnsParams, YieldPanel, DnsState) {
        let grid = MaturityGrid::new(vec![0.5, 2.0, 5.0, 10.0]).unwrap();
        let params = DnsParams::new([0.4, -0.1, 0.05], [0.85, 0.6, -0.3], 0.02, 0.05, 1.3);
        let sim = simulate_dns(&params, &grid, 3, 17, kernel).unwrap();
        let init = DnsState::new([3.0, -1.0, 0.2], Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0));
        (params, sim.panel, init)
    }

    #[test]
    fn kalman_matches_joint_gaussian_oracle() {
        for kernel in [GpKernel::None, GpKernel::default_squared_exponential()] {
            let (params, panel, init) = small_instance(&kernel);
            let ll = marginal_log_likelihood(&params, &panel, &init, &kernel).unwrap();
            let oracle = brute_force_log_lik(&params, &panel, &init, &kernel);
            assert!(((ll - oracle) / oracle).abs() < 1e-8, "{kernel:?}: {ll} vs {oracle}");
        }
    }

    #[test]
    fn single_date_is_one_normal_density() {
        let (params, panel, init) = small_instance(&GpKernel::None);
        let one = panel.single_date(0);
        let ll = marginal_log_likelihood(&params, &one, &init, &GpKernel::None).unwrap();
        assert!((ll - brute_force_log_lik(&params, &one, &init, &GpKernel::None)).abs() < 1e-10);
    }

    #[test]
    fn predict_degenerate_transitions() {
        let state = DnsState::new([1.0, 2.0, 3.0], Matrix3::from_diagonal_element(4.0));
        let p = DnsParams::new([0.5, -0.5, 0.1], [0.0; 3], 0.1, 0.3, 1.0);
        let pred = predict_state(&p, &state);
        assert_eq!(pred.beta_hat, p.theta0);
        assert_eq!(pred.sigma, Matrix3::from_diagonal_element(0.3));
        let id = DnsParams::new([0.0; 3], [1.0; 3], 0.1, 0.0, 1.0);
        assert_eq!(predict_state(&id, &state), state);
    }

    #[test]
    fn predict_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = random_spd(&mut rng);
        let state = DnsState::new([0.3, -0.7, 1.1], sigma);
        let p = DnsParams::new([0.1, 0.2, -0.3], [0.9, -0.4, 0.5], 0.1, 0.07, 1.0);
        let pred = predict_state(&p, &state);
        for i in 0..3 {
            let mean = p.theta0[i] + p.z[i] * state.beta_hat[i];
            assert!((pred.beta_hat[i] - mean).abs() < 1e-14);
            for j in 0..3 {
                let cov = p.z[i] * sigma[(i, j)] * p.z[j] + if i == j { p.sigma_eta2 } else { 0.0 };
                assert!((pred.sigma[(i, j)] - cov).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uninformative_observation_leaves_prior() {
        let grid = fixture_grid();
        let p = stable_params(1.0);
        let p = DnsParams { sigma_eps2: 1e12, ..p };
        let prior = DnsState::new([3.0, -1.0, 0.5], Matrix3::from_diagonal_element(0.5));
        let y: Vec<Option<f64>> = (0..grid.len()).map(|j| Some(2.0 + 0.1 * j as f64)).collect();
        let upd = update_state(&p, &prior, &y, &grid, &GpKernel::None).unwrap();
        assert!((upd.state.beta_hat - prior.beta_hat).amax() < 1e-9);
        assert!((upd.state.sigma - prior.sigma).amax() < 1e-9);
    }

    #[test]
    fn scalar_gain_by_hand() {
        let grid = MaturityGrid::new(vec![2.0]).unwrap();
        let p = DnsParams::new([0.0; 3], [1.0; 3], 0.04, 0.0, 1.5);
        let r = Matrix3::new(0.5, 0.1, 0.0, 0.1, 0.3, 0.05, 0.0, 0.05, 0.2);
        let prior = DnsState::new([3.0, -1.0, 0.2], r);
        let y = 2.4;
        let upd = update_state(&p, &prior, &[Some(y)], &grid, &GpKernel::None).unwrap();
        let x = 2.0 / 1.5;
        let phi = Vector3::new(1.0, slope_loading(x), slope_loading(x) - (-x).exp());
        let s = phi.dot(&(r * phi)) + 0.04;
        let gain = r * phi / s;
        let e = y - phi.dot(&prior.beta_hat);
        assert!((upd.innovation[0].unwrap() - e).abs() < 1e-12);
        let expected = prior.beta_hat + gain * e;
        assert!((upd.state.beta_hat - expected).amax() < 1e-12);
        let expected_cov = r - gain * (phi.transpose() * r);
        assert!((upd.state.sigma - expected_cov).amax() < 1e-12);
    }

    #[test]
    fn zero_amplitude_kernel_matches_plain_filter() {
        let p = stable_params(1.0);
        let sim = simulate_dns(&p, &fixture_grid(), 50, 3, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let plain = filter(&p, &sim.panel, &init, &GpKernel::None).unwrap();
        let zero = GpKernel::SquaredExponential { amplitude2: 0.0, length_scale: 2.0 };
        let gp = filter(&p, &sim.panel, &init, &zero).unwrap();
        assert!((plain.log_likelihood - gp.log_likelihood).abs() < 1e-12 * plain.log_likelihood.abs());
        for (a, b) in plain.filtered.iter().zip(&gp.filtered) {
            assert!((a.beta_hat - b.beta_hat).amax() < 1e-12);
            assert!((a.sigma - b.sigma).amax() < 1e-12);
        }
    }

    #[test]
    fn predict_yield_examples() {
        let state = DnsState::new([3.0, -1.0, 0.0], Matrix3::zeros());
        let (mean, var) = predict_yield(&state, 1.0, 1.0, 0.0).unwrap();
        assert!((mean - 2.3679).abs() < 1e-4);
        assert_eq!(var, 0.0);
        let (far, _) = predict_yield(&state, 1.0, 1e9, 0.0).unwrap();
        assert!((far - 3.0).abs() < 1e-8);
        assert!(predict_yield(&state, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn exact_observation_is_reproduced() {
        let grid = fixture_grid();
        let p = DnsParams::new([0.0; 3], [1.0; 3], 1e-12, 0.0, 1.0);
        let truth = Vector3::new(3.1, -1.4, 0.3);
        let y: Vec<Option<f64>> = grid.taus().iter().map(|&t| Some((loading_row(1.0, t) * truth)[0])).collect();
        let prior = DnsState::new([3.1, -1.4, 0.3], Matrix3::from_diagonal_element(1.0));
        let upd = update_state(&p, &prior, &y, &grid, &GpKernel::None).unwrap();
        for (j, &tau) in grid.taus().iter().enumerate() {
            let (mean, _) = predict_yield(&upd.state, 1.0, tau, 0.0).unwrap();
            assert!((mean - y[j].unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn likelihood_falls_with_huge_noise() {
        let p = stable_params(1.0);
        let sim = simulate_dns(&p, &fixture_grid(), 40, 9, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let ll: Vec<f64> = [1e2, 1e4, 1e6]
            .iter()
            .map(|&s| marginal_log_likelihood(&DnsParams { sigma_eps2: s, ..p }, &sim.panel, &init, &GpKernel::None).unwrap())
            .collect();
        assert!(ll[0] > ll[1] && ll[1] > ll[2], "{ll:?}");
    }

    #[test]
    fn grid_search_edge_cases() {
        let p = stable_params(1.0);
        let sim = simulate_dns(&p, &fixture_grid(), 30, 4, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let (best, scores) = grid_search_lambda(&sim.panel, &p, &[0.7], &init, &GpKernel::None).unwrap();
        assert_eq!(best, 0.7);
        assert_eq!(scores.len(), 1);

        let flat = DnsParams::new([2.0, 0.0, 0.0], [0.0; 3], 0.1, 0.0, 1.0);
        let (best, scores) = grid_search_lambda(&sim.panel, &flat, &[2.0, 0.5, 1.0], &init, &GpKernel::None).unwrap();
        assert_eq!(best, 0.5);
        assert!(scores.windows(2).all(|w| w[0].log_likelihood == w[1].log_likelihood));
        assert!(grid_search_lambda(&sim.panel, &p, &[], &init, &GpKernel::None).is_err());
    }

    #[test]
    fn grid_search_recovers_lambda() {
        let grid = fixture_grid();
        let truth = stable_params(1.0);
        let lambdas = [0.25, 0.5, 1.0, 2.0, 4.0];
        let hits = (0..50u64)
            .into_par_iter()
            .filter(|&seed| {
                let sim = simulate_dns(&truth, &grid, 200, 1000 + seed, &GpKernel::None).unwrap();
                let init = DnsState::diffuse(&sim.panel).unwrap();
                grid_search_lambda(&sim.panel, &truth, &lambdas, &init, &GpKernel::None).unwrap().0 == 1.0
            })
            .count();
        assert!(hits >= 45, "{hits}/50");
    }

    #[test]
    fn profile_search_reestimates_per_lambda() {
        let truth = stable_params(1.0);
        let lambdas = [0.5, 1.0, 1.5, 2.0];
        for seed in 0..5u64 {
            let sim = simulate_dns(&truth, &fixture_grid(), 200, 50 + seed, &GpKernel::None).unwrap();
            let init = DnsState::diffuse(&sim.panel).unwrap();
            let (best, scores) =
                profile_lambda(&sim.panel, &lambdas, &init, &GpKernel::None, two_step_estimate).unwrap();
            assert_eq!(best, 1.0, "seed {seed}: {scores:?}");
        }

        let sim = simulate_dns(&truth, &fixture_grid(), 20, 9, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let picky = |p: &YieldPanel, l: f64| {
            if l < 1.0 {
                Err(Error::Validation("no".into()))
            } else {
                two_step_estimate(p, l)
            }
        };
        let (best, scores) = profile_lambda(&sim.panel, &[0.5, 2.0], &init, &GpKernel::None, picky).unwrap();
        assert_eq!(best, 2.0);
        assert_eq!(scores[0].log_likelihood, None);
        let never = |_: &YieldPanel, _: f64| -> Result<DnsParams> { Err(Error::Validation("no".into())) };
        assert!(matches!(
            profile_lambda(&sim.panel, &[1.0], &init, &GpKernel::None, never),
            Err(Error::Numerical { .. })
        ));
        assert!(profile_lambda(&sim.panel, &[], &init, &GpKernel::None, two_step_estimate).is_err());
    }

    #[test]
    fn noiseless_simulation() {
        let p = DnsParams::new([0.3, -0.2, 0.1], [0.9, 0.5, 0.2], 0.0, 0.0, 1.2);
        let grid = fixture_grid();
        let start = Vector3::new(1.0, 1.0, 1.0);
        let sim = simulate_dns_from(&p, &grid, 20, 1, &GpKernel::None, start).unwrap();
        let mut beta = start;
        for t in 0..20 {
            beta = p.theta0 + p.z_matrix() * beta;
            assert!((sim.states[t] - beta).amax() < 1e-14);
            for (j, &tau) in grid.taus().iter().enumerate() {
                assert!((sim.panel.get(t, j).unwrap() - (loading_row(1.2, tau) * beta)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = stable_params(1.0);
        let k = GpKernel::default_squared_exponential();
        let a = simulate_dns(&p, &fixture_grid(), 25, 77, &k).unwrap();
        let b = simulate_dns(&p, &fixture_grid(), 25, 77, &k).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stationary_mean_is_reached() {
        let p = stable_params(1.0);
        let t_len = 10_000;
        let sim = simulate_dns(&p, &fixture_grid(), t_len, 5, &GpKernel::None).unwrap();
        let target = p.stationary_mean().unwrap();
        for i in 0..3 {
            let phi = p.z[i];
            let var = p.sigma_eta2 / (1.0 - phi * phi);
            let mc_sd = (var * (1.0 + phi) / (1.0 - phi) / t_len as f64).sqrt();
            let mean = sim.states.iter().map(|s| s[i]).sum::<f64>() / t_len as f64;
            assert!((mean - target[i]).abs() < 3.0 * mc_sd, "factor {i}: {mean} vs {}", target[i]);
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let grid = fixture_grid();
        let p = DnsParams::new(
            [0.2, -0.1, 0.05],
            [rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95)],
            rng.random_range(0.001..0.1),
            rng.random_range(0.001..0.1),
            rng.random_range(0.5..3.0),
        );
        let kernel = GpKernel::default_squared_exponential();
        let sim = simulate_dns(&p, &grid, 10_000, 6, &kernel).unwrap();
        let mut state = DnsState::new([3.0, -1.0, 0.0], random_spd(&mut rng));
        for t in 0..sim.panel.n_dates() {
            let pred = predict_state(&p, &state);
            let upd = update_state(&p, &pred, &sim.panel.row(t), &grid, &kernel).unwrap();
            assert!(upd.asymmetry < 1e-10, "t={t}: {}", upd.asymmetry);
            assert_eq!(upd.state.sigma, upd.state.sigma.transpose());
            assert!(SymmetricEigen::new(upd.state.sigma).eigenvalues.min() >= -1e-10);
            state = upd.state;
        }
    }

    #[test]
    fn standardized_innovations_are_standard() {
        let p = stable_params(1.0);
        let grid = fixture_grid();
        let t_len = 1000;
        let sim = simulate_dns(&p, &grid, t_len, 12, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let out = filter(&p, &sim.panel, &init, &GpKernel::None).unwrap();
        let z: Vec<f64> = out
            .innovations
            .iter()
            .zip(&out.innovation_vars)
            .flat_map(|(e, v)| e.iter().zip(v).map(|(e, v)| e.unwrap() / v.unwrap().sqrt()))
            .collect();
        let tol = 3.0 / (z.len() as f64).sqrt();
        let mean = crate::stats::mean(&z);
        let var = crate::stats::variance(&z);
        assert!(mean.abs() < tol, "mean {mean}");
        assert!((var - 1.0).abs() < tol, "var {var}");
    }

    #[test]
    fn conditioning_formula_matches_monte_carlo() {
        // One observed tenor; condition by accepting joint draws whose
        // observation lands in a narrow window around y*.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = MaturityGrid::new(vec![3.0]).unwrap();
        let p = DnsParams::new([0.0; 3], [1.0; 3], 0.05, 0.0, 1.0);
        let r = random_spd(&mut rng) * 0.5;
        let prior = DnsState::new([1.0, -0.5, 0.2], r);
        let phi = loading_row(1.0, 3.0);
        let s = (phi * r * phi.transpose())[0] + p.sigma_eps2;
        let y_star = (phi * prior.beta_hat)[0] + 0.7 * s.sqrt();
        let upd = update_state(&p, &prior, &[Some(y_star)], &grid, &GpKernel::None).unwrap();

        let l = r.cholesky().unwrap().l();
        let half_width = 0.01 * s.sqrt();
        let mut kept: Vec<Vector3<f64>> = Vec::new();
        for _ in 0..2_000_000 {
            let u = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = prior.beta_hat + l * u;
            let y = (phi * beta)[0] + p.sigma_eps2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            if (y - y_star).abs() < half_width {
                kept.push(beta);
            }
        }
        let n = kept.len() as f64;
        assert!(n > 5000.0);
        for i in 0..3 {
            let xs: Vec<f64> = kept.iter().map(|b| b[i]).collect();
            let mean = crate::stats::mean(&xs);
            let var = crate::stats::variance(&xs);
            let target_var = upd.state.sigma[(i, i)];
            assert!((mean - upd.state.beta_hat[i]).abs() < 5.0 * (target_var / n).sqrt(), "mean {i}");
            assert!((var - target_var).abs() < 5.0 * target_var * (2.0 / n).sqrt(), "var {i}");
        }
    }

    #[test]
    fn missing_yields_are_skipped() {
        let p = stable_params(1.0);
        let grid = fixture_grid();
        let prior = DnsState::new([3.0, -1.0, 0.0], Matrix3::from_diagonal_element(0.5));
        let full: Vec<Option<f64>> = (0..grid.len()).map(|j| Some(2.0 + 0.05 * j as f64)).collect();
        let mut partial = full.clone();
        partial[2] = None;
        partial[7] = None;
        let upd = update_state(&p, &prior, &partial, &grid, &GpKernel::None).unwrap();
        assert!(upd.innovation[2].is_none() && upd.innovation[7].is_none());
        let kept: Vec<f64> = grid.taus().iter().enumerate().filter(|(j, _)| *j != 2 && *j != 7).map(|(_, &t)| t).collect();
        let sub = MaturityGrid::new(kept).unwrap();
        let y: Vec<Option<f64>> = partial.iter().copied().filter(Option::is_some).collect();
        let direct = update_state(&p, &prior, &y, &sub, &GpKernel::None).unwrap();
        assert_eq!(upd.state, direct.state);
        let none = vec![None; grid.len()];
        let skip = update_state(&p, &prior, &none, &grid, &GpKernel::None).unwrap();
        assert_eq!(skip.state, prior);
        assert_eq!(skip.log_density, 0.0);
    }

    #[test]
    fn indefinite_covariance_names_the_date() {
        let p = DnsParams::new([0.0; 3], [1.0; 3], 0.0, 0.0, 1.0);
        let sim = simulate_dns(&stable_params(1.0), &fixture_grid(), 5, 2, &GpKernel::None).unwrap();
        let bad = DnsState::new([3.0, -1.0, 0.0], Matrix3::from_diagonal_element(-100.0));
        match filter(&p, &sim.panel, &bad, &GpKernel::None) {
            Err(Error::Numerical { index: Some(0), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_step_and_mle_improve_likelihood() {
        let truth = stable_params(1.0);
        let sim = simulate_dns(&truth, &fixture_grid(), 300, 44, &GpKernel::None).unwrap();
        let init = DnsState::diffuse(&sim.panel).unwrap();
        let start = two_step_estimate(&sim.panel, 1.0).unwrap();
        let ll0 = marginal_log_likelihood(&start, &sim.panel, &init, &GpKernel::None).unwrap();
        let fit = fit_dns_params(&sim.panel, &start, &init, &GpKernel::None, &BfgsOptions { max_iters: 200, grad_tol: 1e-3, ..BfgsOptions::default() }).unwrap();
        assert!(fit.log_likelihood >= ll0);
        assert!((fit.params.sigma_eps2 / truth.sigma_eps2 - 1.0).abs() < 0.2, "{:?}", fit.params);
        // The two-step AR(1) slopes are attenuated by factor noise; the
        // likelihood fit is not.
        for i in 0..3 {
            assert!((fit.params.z[i] - truth.z[i]).abs() < 0.15, "{:?}", fit.params.z);
        }
    }
}
