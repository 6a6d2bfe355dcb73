//! Bayesian Nelson-Siegel yield-curve estimation, a dynamic Nelson-Siegel
//! Kalman filter, and Monte Carlo bond pricing.

pub mod curve;
pub mod dns;
pub mod error;
pub mod hmc;
pub mod map;
pub mod optim;
pub mod panel;
pub mod posterior;
pub mod pricing;
pub mod stats;

pub use curve::{ns_forward_rate, ns_yield, MaturityGrid, NsParams};
pub use error::{Error, Result};
pub use hmc::{diagnostics, sample, summarize, Diagnostics, HmcConfig, PosteriorDraws, PosteriorSummary};
pub use map::{fit_map, MapOptions, MapResult};
pub use panel::{builtin_fixture_may2018, parse_treasury_csv, TenorMap, YieldPanel};
pub use posterior::{log_posterior, Posterior, PriorModel};
pub use dns::{filter, grid_search_lambda, marginal_log_likelihood, simulate_dns, DnsParams, DnsState, GpKernel};
pub use pricing::{price_bond, price_monte_carlo, valuation_verdict, BondSpec, Compounding, PriceSummary, Verdict};
