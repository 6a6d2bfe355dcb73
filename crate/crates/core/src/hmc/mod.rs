//! Posterior sampling of the static Nelson-Siegel model by Hamiltonian Monte
//! Carlo, with summaries and convergence diagnostics.

mod adapt;
mod sampler;
mod summary;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use sampler::{kinetic_energy, leapfrog, run_chain, run_chains, ChainOutput, ChainStats, HmcConfig, DIVERGENCE_THRESHOLD};
pub use summary::{diagnostics, split_rhat, bulk_ess, summarize, Diagnostics, ParamDiagnostics, ParamSummary, PosteriorSummary};

use crate::curve::NsParams;
use crate::error::{Error, Result};
use crate::map::{fit_map, MapOptions};
use crate::panel::YieldPanel;
use crate::posterior::{constrain, LogDensity, Posterior, PriorModel};

/// Share of divergent post-warmup transitions above which sampling fails.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.25;

/// Pooled post-warmup draws on the constrained scale, chain-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    /// One row per draw, one entry per parameter.
    pub values: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub divergent: Vec<bool>,
    /// `chain_starts[c]` is the first row of chain `c`.
    pub chain_starts: Vec<usize>,
    pub chain_stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chain_starts.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }

    /// Row range of chain `c`.
    pub fn chain_range(&self, c: usize) -> std::ops::Range<usize> {
        let end = self.chain_starts.get(c + 1).copied().unwrap_or(self.len());
        self.chain_starts[c]..end
    }

    /// Chain index of each row.
    pub fn chain_of_rows(&self) -> Vec<usize> {
        (0..self.n_chains()).flat_map(|c| self.chain_range(c).map(move |_| c)).collect()
    }

    /// Per-chain columns of parameter `k`.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains())
            .map(|c| self.chain_range(c).map(|i| self.values[i][k]).collect())
            .collect()
    }

    pub fn divergent_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.divergent.iter().filter(|&&d| d).count() as f64 / self.len() as f64
    }

    /// Builds draws for a single-parameter set of chains.
    pub fn from_chains(name: &str, chains: &[Vec<f64>]) -> Self {
        let mut starts = Vec::with_capacity(chains.len());
        let mut values = Vec::new();
        for c in chains {
            starts.push(values.len());
            values.extend(c.iter().map(|&v| vec![v]));
        }
        let n = values.len();
        PosteriorDraws {
            names: vec![name.to_string()],
            values,
            log_post: vec![0.0; n],
            divergent: vec![false; n],
            chain_starts: starts,
            chain_stats: Vec::new(),
        }
    }

    /// Draw `i` as Nelson-Siegel parameters, when the names follow the
    /// static-model layout.
    pub fn params(&self, model: PriorModel, i: usize) -> NsParams {
        model.from_vec(&self.values[i])
    }

    /// Writes one row per draw: parameters, `lp`, `divergent`, `chain`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.names.clone();
        header.extend(["lp".into(), "divergent".into(), "chain".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for (i, c) in self.chain_of_rows().into_iter().enumerate() {
            let mut rec: Vec<String> = self.values[i].iter().map(|v| format!("{v:.6}")).collect();
            rec.push(format!("{:.6}", self.log_post[i]));
            rec.push(u8::from(self.divergent[i]).to_string());
            rec.push(c.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`write_csv`](Self::write_csv). Lines
    /// starting with `#` are skipped; chains must appear in contiguous blocks.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let n = header.len();
        if n < 4 || header[n - 3] != "lp" || header[n - 2] != "divergent" || header[n - 1] != "chain" {
            return Err(Error::format("draws header must end with lp,divergent,chain"));
        }
        let names = header[..n - 3].to_vec();
        let mut draws = PosteriorDraws {
            names,
            values: Vec::new(),
            log_post: Vec::new(),
            divergent: Vec::new(),
            chain_starts: Vec::new(),
            chain_stats: Vec::new(),
        };
        let mut last_chain: Option<usize> = None;
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let cell = |j: usize| -> Result<f64> {
                rec.get(j).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| Error::Format {
                    message: format!("expected a number, found {:?}", rec.get(j).unwrap_or("")),
                    row: Some(row + 2),
                    column: Some(header[j].clone()),
                })
            };
            if rec.len() != n {
                return Err(Error::Format {
                    message: format!("expected {n} fields, found {}", rec.len()),
                    row: Some(row + 2),
                    column: None,
                });
            }
            let values = (0..n - 3).map(cell).collect::<Result<Vec<_>>>()?;
            let chain = cell(n - 1)? as usize;
            if last_chain != Some(chain) {
                if last_chain.is_some_and(|c| chain != c + 1) {
                    return Err(Error::Format {
                        message: "chains must be contiguous and in order".into(),
                        row: Some(row + 2),
                        column: Some("chain".into()),
                    });
                }
                draws.chain_starts.push(draws.values.len());
                last_chain = Some(chain);
            }
            draws.log_post.push(cell(n - 3)?);
            draws.divergent.push(cell(n - 2)? != 0.0);
            draws.values.push(values);
        }
        if draws.is_empty() {
            return Err(Error::format("no draws"));
        }
        Ok(draws)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

/// Samples a generic target from the given unconstrained starting points.
/// Chain `c` uses `inits[c]`; `names` label the returned coordinates, which
/// are mapped through `to_output` after sampling.
pub fn sample_target<T, F>(
    target: &T,
    inits: &[Vec<f64>],
    config: &HmcConfig,
    names: Vec<String>,
    to_output: F,
) -> Result<PosteriorDraws>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    config.validate()?;
    if inits.len() != config.chains {
        return Err(Error::Validation(format!(
            "{} initial points for {} chains",
            inits.len(),
            config.chains
        )));
    }
    let outputs = run_chains(target, inits, config)?;
    let mut draws = PosteriorDraws {
        names,
        values: Vec::with_capacity(config.chains * config.draws),
        log_post: Vec::new(),
        divergent: Vec::new(),
        chain_starts: Vec::new(),
        chain_stats: Vec::new(),
    };
    for out in outputs {
        draws.chain_starts.push(draws.values.len());
        draws.values.extend(out.positions.iter().map(|z| to_output(z)));
        draws.log_post.extend(out.log_density);
        draws.divergent.extend(out.divergent);
        draws.chain_stats.push(out.stats);
    }
    let frac = draws.divergent_fraction();
    if frac > MAX_DIVERGENT_FRACTION {
        let diag = (draws.n_chains() >= 2).then(|| Box::new(diagnostics(&draws)));
        return Err(Error::SamplingQuality {
            message: format!("{:.1}% of draws are divergent", 100.0 * frac),
            draws: Box::new(draws),
            diagnostics: diag,
        });
    }
    Ok(draws)
}

/// Samples the posterior of `model` on `panel`. Chains start at the MAP
/// estimate plus `N(0, init_jitter²)` noise on the unconstrained scale.
///
/// The recorded `log_post` is the unconstrained-scale log density (log
/// likelihood + log prior + log Jacobian).
pub fn sample(model: PriorModel, panel: &YieldPanel, config: &HmcConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let map = fit_map(
        model,
        panel,
        None,
        &MapOptions { seed: config.seed ^ 0xA5A5_A5A5_A5A5_A5A5, ..MapOptions::default() },
    )?;
    sample_from(model, panel, &map.z, config)
}

/// As [`sample`], starting from a given unconstrained point.
pub fn sample_from(model: PriorModel, panel: &YieldPanel, center: &[f64], config: &HmcConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    if center.len() != model.dim() {
        return Err(Error::Validation(format!("start has {} coordinates, {model} needs {}", center.len(), model.dim())));
    }
    let jitter = Normal::new(0.0, config.init_jitter.max(0.0)).map_err(|e| Error::Domain(format!("init jitter: {e}")))?;
    let inits: Vec<Vec<f64>> = (0..config.chains)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0000_0000_0000);
            rng.set_stream(c as u64);
            center.iter().map(|v| v + jitter.sample(&mut rng)).collect()
        })
        .collect();
    let target = Posterior::new(model, panel);
    let names = model.param_names().iter().map(|s| s.to_string()).collect();
    sample_target(&target, &inits, config, names, |z| model.to_vec(&constrain(model, z)))
}
