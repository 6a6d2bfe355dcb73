//! Coupon-bond pricing off a Nelson-Siegel spot curve, and Monte Carlo
//! pricing over posterior draws.
//!
//! By default cash flows are discounted continuously at the curve's spot
//! yield for their date, with yields in percent:
//! `P = Σ CF_k·exp(-y(t_k)/100·t_k)`. See [`Compounding`] for the
//! alternative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{ns_yield, NsParams};
use crate::error::{Error, Result};
use crate::hmc::PosteriorDraws;
use crate::stats;

/// How a spot yield turns into a discount factor for the `k`-th cash flow
/// at time `t_k = k / frequency`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Compounding {
    /// `exp(-y(t_k)/100 · t_k)`.
    #[default]
    Continuous,
    /// `(1 + y(t_k)/100)^(-k)`: the annual yield applied once per coupon
    /// period, without dividing by the frequency.
    PerPeriod,
}

impl Compounding {
    fn discount(self, yield_pct: f64, t: f64, k: usize) -> f64 {
        match self {
            Compounding::Continuous => (-yield_pct / 100.0 * t).exp(),
            Compounding::PerPeriod => (1.0 + yield_pct / 100.0).powi(-(k as i32)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondSpec {
    pub par: f64,
    /// Annual coupon as a fraction of par.
    pub coupon_rate: f64,
    /// Coupon payments per year.
    pub frequency: u32,
    /// Years to maturity; `frequency · maturity` must be a whole number.
    pub maturity: f64,
    #[serde(default)]
    pub compounding: Compounding,
}

impl BondSpec {
    pub fn new(par: f64, coupon_rate: f64, frequency: u32, maturity: f64) -> Self {
        Self {
            par,
            coupon_rate,
            frequency,
            maturity,
            compounding: Compounding::Continuous,
        }
    }

    pub fn with_compounding(mut self, compounding: Compounding) -> Self {
        self.compounding = compounding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.par.is_finite() && self.par > 0.0) {
            return Err(Error::Validation(format!("par must be > 0, got {}", self.par)));
        }
        if !(self.coupon_rate.is_finite() && self.coupon_rate >= 0.0) {
            return Err(Error::Validation(format!("coupon rate must be >= 0, got {}", self.coupon_rate)));
        }
        if ![1, 2, 4, 12].contains(&self.frequency) {
            return Err(Error::Validation(format!("frequency must be 1, 2, 4 or 12, got {}", self.frequency)));
        }
        if !(self.maturity.is_finite() && self.maturity > 0.0) {
            return Err(Error::Validation(format!("maturity must be > 0, got {}", self.maturity)));
        }
        let periods = self.maturity * self.frequency as f64;
        if (periods - periods.round()).abs() > 1e-9 || periods.round() < 1.0 {
            return Err(Error::Validation(format!(
                "maturity {} is not a whole number of {}-per-year coupon periods",
                self.maturity, self.frequency
            )));
        }
        Ok(())
    }

    /// `(t_k, CF_k)` for `k = 1..=frequency·maturity`; the last includes par.
    pub fn cash_flows(&self) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let n = (self.maturity * self.frequency as f64).round() as usize;
        let coupon = self.par * self.coupon_rate / self.frequency as f64;
        Ok((1..=n)
            .map(|k| {
                let t = k as f64 / self.frequency as f64;
                (t, if k == n { coupon + self.par } else { coupon })
            })
            .collect())
    }
}

/// Present value of `bond` on the curve `params`.
pub fn price_bond(params: &NsParams, bond: &BondSpec) -> Result<f64> {
    bond.cash_flows()?
        .into_iter()
        .enumerate()
        .map(|(i, (t, cf))| Ok(cf * bond.compounding.discount(ns_yield(params, t)?, t, i + 1)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceSummary {
    pub mean: f64,
    pub median: f64,
    /// 2.5% quantile.
    pub ci_low: f64,
    /// 97.5% quantile.
    pub ci_high: f64,
    pub sd: f64,
    pub draws_used: usize,
}

impl PriceSummary {
    pub fn from_prices(prices: &[f64]) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::Validation("no prices to summarize".into()));
        }
        let s = stats::sorted(prices);
        Ok(Self {
            mean: stats::mean(prices),
            median: stats::quantile_sorted(&s, 0.5),
            ci_low: stats::quantile_sorted(&s, 0.025),
            ci_high: stats::quantile_sorted(&s, 0.975),
            sd: stats::std_dev(prices),
            draws_used: prices.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloPrice {
    pub summary: PriceSummary,
    /// One price per draw, in draw order.
    pub prices: Vec<f64>,
}

/// Curve parameters of every draw, read from the `beta0`, `beta1`, `beta2`
/// and `lambda` columns.
pub fn curve_params(draws: &PosteriorDraws) -> Result<Vec<NsParams>> {
    let col = |name: &str| {
        draws
            .param_index(name)
            .ok_or_else(|| Error::Validation(format!("draws have no {name} column")))
    };
    let idx = [col("beta0")?, col("beta1")?, col("beta2")?, col("lambda")?];
    let sigma = draws.param_index("sigma");
    Ok(draws
        .values
        .iter()
        .map(|r| NsParams::new(r[idx[0]], r[idx[1]], r[idx[2]], r[idx[3]], sigma.map_or(1.0, |k| r[k])))
        .collect())
}

/// Prices `bond` under every draw. At least 100 draws are advisable for
/// stable 2.5%/97.5% quantiles; fewer are accepted.
pub fn price_monte_carlo(draws: &PosteriorDraws, bond: &BondSpec) -> Result<MonteCarloPrice> {
    bond.validate()?;
    let params = curve_params(draws)?;
    if params.is_empty() {
        return Err(Error::Validation("no draws to price".into()));
    }
    let prices = params
        .par_iter()
        .map(|p| price_bond(p, bond))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloPrice {
        summary: PriceSummary::from_prices(&prices)?,
        prices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Undervalued,
    Fair,
    Overvalued,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Undervalued => "undervalued",
            Verdict::Fair => "fair",
            Verdict::Overvalued => "overvalued",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuationVerdict {
    pub verdict: Verdict,
    pub traded: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Below the band is undervalued, above it overvalued; the edges are fair.
pub fn valuation_verdict(summary: &PriceSummary, traded: f64) -> ValuationVerdict {
    let verdict = if traded < summary.ci_low {
        Verdict::Undervalued
    } else if traded > summary.ci_high {
        Verdict::Overvalued
    } else {
        Verdict::Fair
    };
    ValuationVerdict {
        verdict,
        traded,
        ci_low: summary.ci_low,
        ci_high: summary.ci_high,
    }
}

/// One histogram bin `[lo, hi)`; the last bin is closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over the range of `xs`.
pub fn histogram(xs: &[f64], bins: usize) -> Vec<Bin> {
    if xs.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![Bin { lo, hi, count: xs.len() }];
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|b| Bin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        out[b].count += 1;
    }
    out
}
