//! Nelson-Siegel curve, instantaneous forward rate and the Dynamic
//! Nelson-Siegel factor loadings.
//!
//! Maturities are in years and rates in percent. With `x = τ/λ` the two
//! loadings are
//!
//! - `f1(x) = (1 - e^{-x}) / x` (slope)
//! - `f2(x) = f1(x) - e^{-x}` (curvature)
//!
//! so the yield can be written either as
//! `β0 + (β1 + β2)·f1 - β2·e^{-x}` or as `β0 + β1·f1 + β2·f2`.
//! Both forms are exposed and agree to rounding.

use nalgebra::{DMatrix, RowVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `x = τ/λ` the loadings switch to their Taylor series.
const SERIES_CUTOFF: f64 = 1e-4;

/// Static Nelson-Siegel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsParams {
    /// Long-run level, percent.
    pub beta0: f64,
    /// Short-term effect, percent.
    pub beta1: f64,
    /// Mid-term effect, percent.
    pub beta2: f64,
    /// Decay factor, years.
    pub lambda: f64,
    /// Observation noise standard deviation, percent.
    pub sigma: f64,
    /// Scale of the hierarchical prior on the betas (Models 2 and 3 only).
    pub sigma_beta: Option<f64>,
}

impl NsParams {
    pub fn new(beta0: f64, beta1: f64, beta2: f64, lambda: f64, sigma: f64) -> Self {
        Self {
            beta0,
            beta1,
            beta2,
            lambda,
            sigma,
            sigma_beta: None,
        }
    }

    pub fn with_sigma_beta(mut self, sigma_beta: f64) -> Self {
        self.sigma_beta = Some(sigma_beta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let betas = [self.beta0, self.beta1, self.beta2];
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain(format!("non-finite beta in {betas:?}")));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Domain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if let Some(sb) = self.sigma_beta {
            if !(sb.is_finite() && sb > 0.0) {
                return Err(Error::Domain(format!("sigma_beta must be > 0, got {sb}")));
            }
        }
        Ok(())
    }

    /// Fitted yield at `tau`, without input checks. See [`ns_yield`].
    #[inline]
    pub fn yield_at(&self, tau: f64) -> f64 {
        let x = tau / self.lambda;
        self.beta0 + self.beta1 * slope_loading(x) + self.beta2 * curvature_loading(x)
    }

    pub fn factors(&self) -> [f64; 3] {
        [self.beta0, self.beta1, self.beta2]
    }
}

/// Strictly increasing list of positive maturities in years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityGrid(Vec<f64>);

impl MaturityGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Domain("maturity grid is empty".into()));
        }
        if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Domain(format!("maturity {t} is not positive and finite")));
        }
        if let Some(w) = taus.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!(
                "maturities must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self(taus))
    }

    pub fn taus(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(1 - e^{-x}) / x`, with the limit 1 at `x = 0`.
#[inline]
pub fn slope_loading(x: f64) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// `f1(x) - e^{-x}`, with the limit 0 at `x = 0`.
#[inline]
pub fn curvature_loading(x: f64) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        x / 2.0 - x * x / 3.0 + x * x * x / 8.0
    } else {
        slope_loading(x) - (-x).exp()
    }
}

/// Derivative of [`slope_loading`] with respect to `x`.
#[inline]
pub(crate) fn slope_loading_dx(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        -0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0
    } else {
        // (x e^{-x} - (1 - e^{-x})) / x^2
        (x * (-x).exp() + (-x).exp_m1()) / (x * x)
    }
}

fn check_finite(params: &NsParams, tau: f64) -> Result<()> {
    let all = [
        params.beta0,
        params.beta1,
        params.beta2,
        params.lambda,
        tau,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite input (params {params:?}, tau {tau})"
        )));
    }
    if tau < 0.0 {
        return Err(Error::Domain(format!("maturity must be >= 0, got {tau}")));
    }
    if params.lambda <= 0.0 {
        return Err(Error::Domain(format!("lambda must be > 0, got {}", params.lambda)));
    }
    Ok(())
}

/// Nelson-Siegel yield in its original form
/// `β0 + (β1 + β2)·(1 - e^{-τ/λ})/(τ/λ) - β2·e^{-τ/λ}`.
///
/// At `tau = 0` this is the limit `β0 + β1`.
pub fn ns_yield(params: &NsParams, tau: f64) -> Result<f64> {
    check_finite(params, tau)?;
    let x = tau / params.lambda;
    Ok(params.beta0 + (params.beta1 + params.beta2) * slope_loading(x)
        - params.beta2 * (-x).exp())
}

/// Instantaneous forward rate `β0 + β1·e^{-τ/λ} + β2·(τ/λ)·e^{-τ/λ}`.
pub fn ns_forward_rate(params: &NsParams, tau: f64) -> Result<f64> {
    check_finite(params, tau)?;
    let x = tau / params.lambda;
    let decay = (-x).exp();
    Ok(params.beta0 + params.beta1 * decay + params.beta2 * x * decay)
}

/// Loadings row `(1, f1(τ), f2(τ))` for a single maturity.
pub fn loading_row(lambda: f64, tau: f64) -> RowVector3<f64> {
    let x = tau / lambda;
    RowVector3::new(1.0, slope_loading(x), curvature_loading(x))
}

/// The `m × 3` Dynamic Nelson-Siegel loading matrix for `grid`.
pub fn dns_loadings(lambda: f64, grid: &MaturityGrid) -> Result<DMatrix<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    let taus = grid.taus();
    let mut phi = DMatrix::zeros(taus.len(), 3);
    for (j, &tau) in taus.iter().enumerate() {
        phi.set_row(j, &loading_row(lambda, tau));
    }
    Ok(phi)
}
