use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Bayesian Nelson-Siegel yield curves: MAP fits, posterior sampling,
/// Dynamic Nelson-Siegel filtering and Monte Carlo bond pricing.
#[derive(Debug, Parser)]
#[command(name = "nsbayes", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Posterior-mode fit of the static Nelson-Siegel curve.
    Fit(FitArgs),
    /// Posterior sampling by Hamiltonian Monte Carlo.
    Sample(SampleArgs),
    /// Dynamic Nelson-Siegel Kalman filter with a decay-factor grid search.
    Filter(FilterArgs),
    /// Monte Carlo price of a coupon bond over posterior draws.
    Price(PriceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelTag {
    M1,
    M2,
    M3,
}

impl From<ModelTag> for nsbayes::PriorModel {
    fn from(tag: ModelTag) -> Self {
        match tag {
            ModelTag::M1 => nsbayes::PriorModel::Model1,
            ModelTag::M2 => nsbayes::PriorModel::Model2,
            ModelTag::M3 => nsbayes::PriorModel::Model3,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Treasury-style or canonical yield CSV. One of `--input` and
    /// `--fixture` is required unless the command has another data source.
    #[arg(long, value_name = "PATH", conflicts_with = "fixture")]
    input: Option<PathBuf>,

    /// Use the built-in six-day May 2018 panel.
    #[arg(long)]
    fixture: bool,

    /// Extra tenor label mapping, e.g. `--tenor "4 Mo=0.3333"`.
    #[arg(long = "tenor", value_name = "LABEL=YEARS")]
    tenors: Vec<String>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Directory for output files.
    #[arg(long, env = "NSBAYES_OUT_DIR", default_value = "nsbayes-out")]
    out_dir: PathBuf,

    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Debug, Clone, Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 1024)]
    max_leapfrog: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Prior models to fit.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["m1", "m2", "m3"])]
    model: Vec<ModelTag>,

    /// Also fit each date separately (warm-started), written to fit_rolling.csv.
    #[arg(long)]
    rolling: bool,

    #[arg(long, default_value_t = 8)]
    restarts: usize,

    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[arg(long, value_enum, default_value_t = ModelTag::M2)]
    model: ModelTag,

    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Candidate decay factors in years.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0])]
    lambda_grid: Vec<f64>,

    /// Squared amplitude of a squared-exponential observation kernel; no
    /// kernel when absent.
    #[arg(long)]
    gp_amplitude: Option<f64>,

    /// Length scale of the observation kernel in years.
    #[arg(long, default_value_t = 2.0)]
    gp_length: f64,

    /// Iteration cap of the likelihood refinement; 0 keeps the two-step estimate.
    #[arg(long, default_value_t = 200)]
    mle_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CompoundingArg {
    Continuous,
    PerPeriod,
}

#[derive(Debug, Args)]
struct PriceArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[arg(long, value_enum, default_value_t = ModelTag::M3)]
    model: ModelTag,

    /// Posterior draws CSV from `sample`; sampled afresh when absent.
    #[arg(long, value_name = "PATH")]
    draws_file: Option<PathBuf>,

    #[command(flatten)]
    sampler: SamplerArgs,

    #[arg(long, default_value_t = 1000.0)]
    par: f64,

    /// Annual coupon rate as a fraction.
    #[arg(long, default_value_t = 0.04)]
    coupon: f64,

    /// Coupon payments per year.
    #[arg(long, default_value_t = 2)]
    freq: u32,

    /// Years to maturity.
    #[arg(long, default_value_t = 15.0)]
    maturity: f64,

    #[arg(long, value_enum, default_value_t = CompoundingArg::Continuous)]
    compounding: CompoundingArg,

    /// Market price to classify against the credible band.
    #[arg(long)]
    traded: Option<f64>,

    #[arg(long, default_value_t = 40)]
    bins: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Sample(args) => commands::sample(&args),
        Command::Filter(args) => commands::filter(&args),
        Command::Price(args) => commands::price(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

