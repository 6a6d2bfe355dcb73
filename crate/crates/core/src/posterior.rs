//! Gaussian likelihood for the static Nelson-Siegel curve, the three prior
//! models, and the log-posterior on an unconstrained parameterisation.
//!
//! Unconstrained coordinates are ordered `(β0, β1, β2, λ, σ[, σβ])`. Positive
//! parameters (`λ`, `σ`, `σβ`, and every beta under Model 1) are log
//! transformed; the betas of the hierarchical models are left as is.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, InverseGamma as StatrsInverseGamma};
use statrs::function::gamma::ln_gamma;

use crate::curve::{curvature_loading, slope_loading, slope_loading_dx, NsParams};
use crate::error::{Error, Result};
use crate::panel::YieldPanel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inverse-Gamma with shape `a` and rate `b`: density `b^a/Γ(a)·x^{-a-1}·e^{-b/x}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub const fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (a, b) = (self.shape, self.rate);
        a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
    }

    /// Derivative of [`Self::ln_pdf`] in `x`.
    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        -(self.shape + 1.0) / x + self.rate / (x * x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        StatrsInverseGamma::new(self.shape, self.rate)
            .map(|d| d.cdf(x))
            .unwrap_or(f64::NAN)
    }

    pub fn mode(&self) -> f64 {
        self.rate / (self.shape + 1.0)
    }
}

/// Prior over the Nelson-Siegel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorModel {
    /// Independent Inverse-Gamma(1, 1) on all of `(β0, β1, β2, λ, σ)`.
    Model1,
    /// `β ~ Normal(0, σβ)`, Inverse-Gamma(1, 1) on `(λ, σ, σβ)`.
    Model2,
    /// As Model 2 with Inverse-Gamma(0.1, 0.1) on `(λ, σ, σβ)`.
    Model3,
}

impl PriorModel {
    pub const ALL: [PriorModel; 3] = [PriorModel::Model1, PriorModel::Model2, PriorModel::Model3];

    pub fn tag(&self) -> &'static str {
        match self {
            PriorModel::Model1 => "m1",
            PriorModel::Model2 => "m2",
            PriorModel::Model3 => "m3",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag.trim().to_ascii_lowercase().as_str() {
            "m1" | "1" | "model1" => Some(PriorModel::Model1),
            "m2" | "2" | "model2" => Some(PriorModel::Model2),
            "m3" | "3" | "model3" => Some(PriorModel::Model3),
            _ => None,
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        !matches!(self, PriorModel::Model1)
    }

    /// Number of free parameters.
    pub fn dim(&self) -> usize {
        if self.is_hierarchical() {
            6
        } else {
            5
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        const NAMES: [&str; 6] = ["beta0", "beta1", "beta2", "lambda", "sigma", "sigma_beta"];
        &NAMES[..self.dim()]
    }

    /// Inverse-Gamma prior on the positive-only parameters.
    pub fn scale_prior(&self) -> InverseGamma {
        match self {
            PriorModel::Model1 | PriorModel::Model2 => InverseGamma::new(1.0, 1.0),
            PriorModel::Model3 => InverseGamma::new(0.1, 0.1),
        }
    }

    /// Whether unconstrained coordinate `k` is log transformed.
    pub fn is_log_coordinate(&self, k: usize) -> bool {
        k >= 3 || !self.is_hierarchical()
    }

    /// Parameter vector in coordinate order.
    pub fn to_vec(&self, params: &NsParams) -> Vec<f64> {
        let mut v = vec![params.beta0, params.beta1, params.beta2, params.lambda, params.sigma];
        if self.is_hierarchical() {
            v.push(params.sigma_beta.unwrap_or(f64::NAN));
        }
        v
    }

    pub fn from_vec(&self, v: &[f64]) -> NsParams {
        let p = NsParams::new(v[0], v[1], v[2], v[3], v[4]);
        if self.is_hierarchical() {
            p.with_sigma_beta(v[5])
        } else {
            p
        }
    }
}

impl std::fmt::Display for PriorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// A point in `ℝ^p`, mapped bijectively onto the support of a prior model.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedPoint(pub Vec<f64>);

/// Maps unconstrained coordinates onto the model's parameter space.
pub fn constrain(model: PriorModel, z: &[f64]) -> NsParams {
    let v: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(k, &zk)| if model.is_log_coordinate(k) { zk.exp() } else { zk })
        .collect();
    model.from_vec(&v)
}

/// Inverse of [`constrain`]. Fails when `params` lies outside the support.
pub fn unconstrain(model: PriorModel, params: &NsParams) -> Result<UnconstrainedPoint> {
    if model.is_hierarchical() && params.sigma_beta.is_none() {
        return Err(Error::Domain(format!("{model} requires sigma_beta")));
    }
    let v = model.to_vec(params);
    let mut z = Vec::with_capacity(v.len());
    for (k, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Domain(format!(
                "{} is not finite",
                model.param_names()[k]
            )));
        }
        if model.is_log_coordinate(k) {
            if x <= 0.0 {
                return Err(Error::Domain(format!(
                    "{} must be > 0 under {model}, got {x}",
                    model.param_names()[k]
                )));
            }
            z.push(x.ln());
        } else {
            z.push(x);
        }
    }
    Ok(UnconstrainedPoint(z))
}

/// `Σ log N(y_ij; μ(τ_j), σ²)` over the observed cells of `panel`.
pub fn log_likelihood(panel: &YieldPanel, params: &NsParams) -> Result<f64> {
    if !(params.sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {}", params.sigma)));
    }
    params.validate()?;
    if panel.n_observed() == 0 {
        return Err(Error::Validation("panel has no observations".into()));
    }
    let mut ssr = 0.0;
    let mut n = 0usize;
    for (_, tau, y) in panel.observations() {
        let r = y - params.yield_at(tau);
        ssr += r * r;
        n += 1;
    }
    let s2 = params.sigma * params.sigma;
    Ok(-0.5 * n as f64 * (LN_2PI + s2.ln()) - ssr / (2.0 * s2))
}

fn ln_normal(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - x * x / (2.0 * sd * sd)
}

/// Log prior density. Out-of-support values give `-∞`; a hierarchical model
/// without `sigma_beta` is a domain error.
pub fn log_prior(model: PriorModel, params: &NsParams) -> Result<f64> {
    let ig = model.scale_prior();
    let mut lp = ig.ln_pdf(params.lambda) + ig.ln_pdf(params.sigma);
    match model {
        PriorModel::Model1 => {
            lp += params.factors().iter().map(|&b| ig.ln_pdf(b)).sum::<f64>();
        }
        PriorModel::Model2 | PriorModel::Model3 => {
            let sb = params
                .sigma_beta
                .ok_or_else(|| Error::Domain(format!("{model} requires sigma_beta")))?;
            lp += ig.ln_pdf(sb);
            if sb > 0.0 && sb.is_finite() {
                lp += params.factors().iter().map(|&b| ln_normal(b, sb)).sum::<f64>();
            }
        }
    }
    if lp.is_nan() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lp)
}

/// A log density on `ℝ^p` with its gradient, as consumed by the optimiser
/// and the sampler.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. Any
    /// non-finite intermediate is reported as an error.
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Unnormalised log posterior of a prior model on a yield panel, evaluated at
/// unconstrained coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a> {
    model: PriorModel,
    panel: &'a YieldPanel,
    jacobian: bool,
}

impl<'a> Posterior<'a> {
    /// Density of the unconstrained coordinates (log-Jacobian included); the
    /// target for sampling.
    pub fn new(model: PriorModel, panel: &'a YieldPanel) -> Self {
        Self {
            model,
            panel,
            jacobian: true,
        }
    }

    /// Natural-scale posterior density expressed in unconstrained
    /// coordinates, without the log-Jacobian. Its maximiser is the posterior
    /// mode of the original parameters.
    pub fn mode_objective(model: PriorModel, panel: &'a YieldPanel) -> Self {
        Self {
            model,
            panel,
            jacobian: false,
        }
    }

    pub fn model(&self) -> PriorModel {
        self.model
    }

    pub fn panel(&self) -> &'a YieldPanel {
        self.panel
    }

    pub fn includes_jacobian(&self) -> bool {
        self.jacobian
    }

    /// Log density and gradient as owned values.
    pub fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.dim()];
        let v = self.log_density_grad(z, &mut g)?;
        Ok((v, g))
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> Result<f64> {
        let model = self.model;
        let p = model.dim();
        if z.len() != p || grad.len() != p {
            return Err(Error::Domain(format!("expected {p} coordinates, got {}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite unconstrained point", None));
        }
        let params = constrain(model, z);
        let theta = model.to_vec(&params);
        let (b0, b1, b2, lam, sig) = (theta[0], theta[1], theta[2], theta[3], theta[4]);

        // Likelihood, accumulated per tenor.
        let m = self.panel.n_tenors();
        let taus = self.panel.grid().taus();
        let mut g = [0.0f64; 6];
        let mut ssr = 0.0;
        let mut n_obs = 0usize;
        for (j, &tau) in taus.iter().enumerate().take(m) {
            let x = tau / lam;
            let decay = (-x).exp();
            let f1 = slope_loading(x);
            let f2 = curvature_loading(x);
            let mu = b0 + b1 * f1 + b2 * f2;
            // dμ/dλ = -(x/λ)·[(β1+β2)·f1'(x) + β2·e^{-x}]
            let dmu_dlam = -(x / lam) * ((b1 + b2) * slope_loading_dx(x) + b2 * decay);
            for i in 0..self.panel.n_dates() {
                if let Some(y) = self.panel.get(i, j) {
                    let r = y - mu;
                    ssr += r * r;
                    n_obs += 1;
                    g[0] += r;
                    g[1] += r * f1;
                    g[2] += r * f2;
                    g[3] += r * dmu_dlam;
                }
            }
        }
        let s2 = sig * sig;
        for gk in g.iter_mut().take(4) {
            *gk /= s2;
        }
        g[4] = -(n_obs as f64) / sig + ssr / (s2 * sig);
        let mut lp = -0.5 * n_obs as f64 * (LN_2PI + s2.ln()) - ssr / (2.0 * s2);

        // Prior.
        let ig = model.scale_prior();
        lp += ig.ln_pdf(lam) + ig.ln_pdf(sig);
        g[3] += ig.d_ln_pdf(lam);
        g[4] += ig.d_ln_pdf(sig);
        match model {
            PriorModel::Model1 => {
                for k in 0..3 {
                    lp += ig.ln_pdf(theta[k]);
                    g[k] += ig.d_ln_pdf(theta[k]);
                }
            }
            PriorModel::Model2 | PriorModel::Model3 => {
                let sb = theta[5];
                lp += ig.ln_pdf(sb);
                g[5] += ig.d_ln_pdf(sb);
                for k in 0..3 {
                    let b = theta[k];
                    lp += ln_normal(b, sb);
                    g[k] += -b / (sb * sb);
                    g[5] += -1.0 / sb + b * b / (sb * sb * sb);
                }
            }
        }

        // Chain rule to unconstrained coordinates.
        for k in 0..p {
            if model.is_log_coordinate(k) {
                grad[k] = g[k] * theta[k];
                if self.jacobian {
                    lp += z[k];
                    grad[k] += 1.0;
                }
            } else {
                grad[k] = g[k];
            }
        }

        if !lp.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite log posterior", None));
        }
        Ok(lp)
    }
}

/// Log posterior (log-Jacobian included) and its gradient at `point`.
pub fn log_posterior(
    model: PriorModel,
    panel: &YieldPanel,
    point: &UnconstrainedPoint,
) -> Result<(f64, Vec<f64>)> {
    Posterior::new(model, panel).evaluate(&point.0)
}

/// Poisson probabilities `e^{-λ}·λ^y / y!` for each rate in `lambdas`; the
/// likelihood curve of a single count `y`.
pub fn poisson_likelihood_demo(y: u64, lambdas: &[f64]) -> Result<Vec<f64>> {
    lambdas
        .iter()
        .map(|&lam| {
            if !(lam > 0.0 && lam.is_finite()) {
                return Err(Error::Domain(format!("Poisson rate must be > 0, got {lam}")));
            }
            let yf = y as f64;
            Ok((-lam + yf * lam.ln() - ln_gamma(yf + 1.0)).exp())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::curve::MaturityGrid;
    use crate::panel::builtin_fixture_may2018;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_peak_log_density(sigma: f64) -> f64 {
        -0.5 * (2.0 * PI * sigma * sigma).ln()
    }

    fn model2_mode() -> NsParams {
        NsParams::new(3.111, -1.440, -0.016, 0.950, 0.043).with_sigma_beta(1.636)
    }

    fn one_point_panel(tau: f64, y: f64) -> YieldPanel {
        YieldPanel::from_complete(
            vec![NaiveDate::from_ymd_opt(2018, 5, 1).unwrap()],
            MaturityGrid::new(vec![tau]).unwrap(),
            vec![vec![y]],
        )
        .unwrap()
    }

    fn random_point(model: PriorModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..model.dim())
            .map(|k| {
                if k < 3 && model.is_hierarchical() {
                    rng.random_range(-4.0..6.0)
                } else {
                    rng.random_range(-2.5..2.0)
                }
            })
            .collect()
    }

    #[test]
    fn zero_residual_likelihood() {
        let p = NsParams::new(3.0, -1.0, 0.5, 1.2, 0.07);
        let panel = one_point_panel(2.0, p.yield_at(2.0));
        let ll = log_likelihood(&panel, &p).unwrap();
        assert!((ll - gaussian_peak_log_density(0.07)).abs() < 1e-12);
    }

    #[test]
    fn doubling_residuals() {
        let p = model2_mode();
        let fixture = builtin_fixture_may2018();
        let doubled_rows: Vec<Vec<f64>> = (0..fixture.n_dates())
            .map(|i| {
                fixture
                    .grid()
                    .taus()
                    .iter()
                    .enumerate()
                    .map(|(j, &tau)| {
                        let mu = p.yield_at(tau);
                        mu + 2.0 * (fixture.get(i, j).unwrap() - mu)
                    })
                    .collect()
            })
            .collect();
        let doubled = YieldPanel::from_complete(fixture.dates().to_vec(), fixture.grid().clone(), doubled_rows).unwrap();
        let ssr: f64 = fixture
            .observations()
            .map(|(_, tau, y)| (y - p.yield_at(tau)).powi(2))
            .sum();
        let drop = log_likelihood(&fixture, &p).unwrap() - log_likelihood(&doubled, &p).unwrap();
        let expected = ssr * 3.0 / (2.0 * p.sigma * p.sigma);
        assert!((drop - expected).abs() < 1e-9 * expected.max(1.0), "{drop} vs {expected}");
    }

    #[test]
    fn likelihood_prefers_fitted_sigma() {
        let p = model2_mode();
        let mut wide = p;
        wide.sigma *= 2.0;
        let fixture = builtin_fixture_may2018();
        let a = log_likelihood(&fixture, &p).unwrap();
        let b = log_likelihood(&fixture, &wide).unwrap();
        assert!(a.is_finite() && a > b, "{a} <= {b}");
        let mut bad = p;
        bad.sigma = 0.0;
        assert!(matches!(log_likelihood(&fixture, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_gamma_cdf_at_thirty() {
        let ig = PriorModel::Model1.scale_prior();
        let c = ig.cdf(30.0);
        assert!((c - (-1.0f64 / 30.0).exp()).abs() < 1e-12);
        assert!((c - 0.967).abs() < 5e-4);
    }

    #[test]
    fn inverse_gamma_mode() {
        let ig = InverseGamma::new(1.0, 1.0);
        assert_eq!(ig.mode(), 0.5);
        assert!(ig.d_ln_pdf(0.5).abs() < 1e-12);
        assert!(ig.ln_pdf(0.5) > ig.ln_pdf(0.49) && ig.ln_pdf(0.5) > ig.ln_pdf(0.51));
    }

    #[test]
    fn inverse_gamma_density_normalised() {
        // Trapezoid on a log grid; the IG(1,1) density integrates to 1.
        let ig = InverseGamma::new(1.0, 1.0);
        let n = 200_000;
        let (lo, hi) = (1e-4f64.ln(), 1e8f64.ln());
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|k| {
                let u = lo + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * (ig.ln_pdf(u.exp()) + u).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn hierarchical_zero_betas() {
        let sb = 1.7;
        let p = NsParams::new(0.0, 0.0, 0.0, 1.0, 0.1).with_sigma_beta(sb);
        let ig = PriorModel::Model2.scale_prior();
        let expected = 3.0 * (-0.5 * (2.0 * PI * sb * sb).ln()) + ig.ln_pdf(1.0) + ig.ln_pdf(0.1) + ig.ln_pdf(sb);
        assert!((log_prior(PriorModel::Model2, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn model1_support() {
        let ok = NsParams::new(3.0, 0.2, 1.0, 1.0, 0.1);
        assert!(log_prior(PriorModel::Model1, &ok).unwrap().is_finite());
        for k in 0..5 {
            for bad_value in [0.0, -0.3] {
                let mut v = PriorModel::Model1.to_vec(&ok);
                v[k] = bad_value;
                let p = PriorModel::Model1.from_vec(&v);
                assert_eq!(log_prior(PriorModel::Model1, &p).unwrap(), f64::NEG_INFINITY);
            }
        }
        assert!(log_prior(PriorModel::Model2, &ok).is_err());
    }

    #[test]
    fn model1_prior_exchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b: [f64; 3] = [rng.random_range(0.01..9.0), rng.random_range(0.01..9.0), rng.random_range(0.01..9.0)];
            let base = log_prior(PriorModel::Model1, &NsParams::new(b[0], b[1], b[2], 0.9, 0.05)).unwrap();
            for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
                let q = NsParams::new(b[perm[0]], b[perm[1]], b[perm[2]], 0.9, 0.05);
                assert!((log_prior(PriorModel::Model1, &q).unwrap() - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in PriorModel::ALL {
            for _ in 0..1000 {
                let z = random_point(model, &mut rng);
                let theta = constrain(model, &z);
                let z2 = unconstrain(model, &theta).unwrap();
                let theta2 = constrain(model, &z2.0);
                for (a, b) in model.to_vec(&theta).iter().zip(model.to_vec(&theta2)) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
        let neg = NsParams::new(3.0, -1.0, 0.0, 1.0, 0.1);
        assert!(unconstrain(PriorModel::Model1, &neg).is_err());
    }

    fn check_gradient(post: &Posterior, z: &[f64]) {
        let (_, g) = post.evaluate(z).unwrap();
        let h = 1e-5;
        for k in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[k] += h;
            zm[k] -= h;
            let fd = (post.evaluate(&zp).unwrap().0 - post.evaluate(&zm).unwrap().0) / (2.0 * h);
            let scale = g[k].abs().max(fd.abs()).max(1.0);
            assert!(
                (g[k] - fd).abs() / scale < 1e-5,
                "coordinate {k}: analytic {} vs fd {fd} at {z:?}",
                g[k]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fixture = builtin_fixture_may2018();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in PriorModel::ALL {
            for jac in [true, false] {
                let post = if jac {
                    Posterior::new(model, &fixture)
                } else {
                    Posterior::mode_objective(model, &fixture)
                };
                for _ in 0..50 {
                    let z = random_point(model, &mut rng);
                    check_gradient(&post, &z);
                }
                // Near the sigma -> 0 boundary.
                let mut z = unconstrain(model, &NsParams::new(3.1, 0.5, 0.2, 0.95, 0.01).with_sigma_beta(1.6)).unwrap().0;
                if model.is_hierarchical() {
                    z[1] = -1.44;
                }
                check_gradient(&post, &z);
            }
        }
    }

    #[test]
    fn differences_ignore_normaliser() {
        // Scaling the density by any constant leaves differences unchanged;
        // the evaluation carries no data-dependent constant beyond the
        // likelihood, so two points differ by exactly lik + prior + jacobian.
        let fixture = builtin_fixture_may2018();
        let model = PriorModel::Model2;
        let post = Posterior::new(model, &fixture);
        let a = unconstrain(model, &model2_mode()).unwrap();
        let mut bz = a.0.clone();
        bz[0] += 0.02;
        bz[3] -= 0.1;
        let b = UnconstrainedPoint(bz);
        let direct = |pt: &UnconstrainedPoint| {
            let th = constrain(model, &pt.0);
            log_likelihood(&fixture, &th).unwrap() + log_prior(model, &th).unwrap() + pt.0[3] + pt.0[4] + pt.0[5]
        };
        let diff = post.evaluate(&a.0).unwrap().0 - post.evaluate(&b.0).unwrap().0;
        assert!((diff - (direct(&a) - direct(&b))).abs() < 1e-9);
        let (lp, _) = log_posterior(model, &fixture, &a).unwrap();
        assert!((lp - direct(&a)).abs() < 1e-9);
    }

    #[test]
    fn grid_argmax_is_interior_near_mode() {
        // 5-D grid at about half a posterior sd per step, sigma_beta held
        // at its mode value.
        let fixture = builtin_fixture_may2018();
        let model = PriorModel::Model2;
        let around = |c: f64, h: f64| [c - 2.0 * h, c - h, c, c + h, c + 2.0 * h];
        let b0s = around(3.111, 0.005);
        let b1s = around(-1.44, 0.01);
        let b2s = around(-0.016, 0.08);
        let lams = around(0.95, 0.06);
        let sigs = around(0.043, 0.005);
        let mut best = (f64::NEG_INFINITY, [0usize; 5]);
        for (i0, &b0) in b0s.iter().enumerate() {
            for (i1, &b1) in b1s.iter().enumerate() {
                for (i2, &b2) in b2s.iter().enumerate() {
                    for (i3, &l) in lams.iter().enumerate() {
                        for (i4, &s) in sigs.iter().enumerate() {
                            let p = NsParams::new(b0, b1, b2, l, s).with_sigma_beta(1.636);
                            let v = log_likelihood(&fixture, &p).unwrap() + log_prior(model, &p).unwrap();
                            if v > best.0 {
                                best = (v, [i0, i1, i2, i3, i4]);
                            }
                        }
                    }
                }
            }
        }
        assert!(best.1.iter().all(|&i| i > 0 && i < 4), "argmax on boundary: {:?}", best.1);
        assert_eq!(best.1[0], 2);
        assert_eq!(best.1[1], 2);
    }

    #[test]
    fn non_finite_point_is_flagged() {
        let fixture = builtin_fixture_may2018();
        let post = Posterior::new(PriorModel::Model2, &fixture);
        let mut z = vec![0.0; 6];
        z[4] = -800.0; // sigma underflows to zero
        assert!(matches!(post.evaluate(&z), Err(Error::Numerical { .. })));
        z[4] = f64::NAN;
        assert!(post.evaluate(&z).is_err());
    }

    #[test]
    fn poisson_demo_values() {
        let probs = poisson_likelihood_demo(5, &[3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let expected = [0.101, 0.156, 0.175, 0.161, 0.128];
        for (p, e) in probs.iter().zip(expected) {
            assert!((p - e).abs() < 5e-4, "{p} vs {e}");
        }
        let zero = poisson_likelihood_demo(0, &[1.0]).unwrap();
        assert!((zero[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(poisson_likelihood_demo(5, &[-1.0]).is_err());
    }
}
