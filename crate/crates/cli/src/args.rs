use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fdar::analysis::Functional;
use fdar::io::ModelFormat;
use fdar::Kernel;

pub const SCHEMA_HELP: &str = "\
Input schemas:
  observations CSV   header `period,value`; one row per observation, periods may be interleaved
  density CSV        header `x,density`; equally spaced abscissae
  study config       JSON or TOML with t_values, n_values, iterations, seed, optional burn_in,
                     generator {kind = synthetic | model} and k {mode = fixed | cross_validation}
  pipeline config    JSON or TOML, see docs/config.md

Exit status: 0 success, 1 invalid input or usage, 2 computation failure.
Set FAR_THREADS to cap the number of worker threads.";

#[derive(Debug, Parser)]
#[command(name = "fdar", version, about = "Functional autoregression of time-varying densities", after_help = SCHEMA_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate densities from observations and fit the autoregressive operator.
    Estimate(EstimateArgs),
    /// Forecast the next densities from a fitted model.
    Forecast(ForecastArgs),
    /// Interpret a fitted model.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Rolling out-of-sample comparison of FAR, AVE and LAST forecasts.
    Backtest(BacktestArgs),
    /// Monte Carlo forecasting study driven by a config file.
    Simulate(SimulateArgs),
    /// Draw observations from a density by rejection sampling.
    Sample(SampleArgs),
    /// Run estimation and analysis from a pipeline config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Number of grid points.
    #[arg(long = "grid-n", default_value_t = fdar::function_space::DEFAULT_GRID_POINTS)]
    pub grid_n: usize,
    /// Lower end of the support; chosen from the data when omitted.
    #[arg(long, requires = "b", allow_negative_numbers = true)]
    pub a: Option<f64>,
    /// Upper end of the support.
    #[arg(long, requires = "a", allow_negative_numbers = true)]
    pub b: Option<f64>,
    /// Share of pooled observations the automatic support must cover.
    #[arg(long, default_value_t = 0.999)]
    pub coverage: f64,
    #[arg(long, default_value_t = Kernel::Epanechnikov)]
    pub kernel: Kernel,
}

#[derive(Debug, Args)]
pub struct KArgs {
    /// Fixed truncation level.
    #[arg(long = "K", conflicts_with = "k_candidates")]
    pub k: Option<usize>,
    /// Candidate truncation levels for cross-validation, e.g. `1..8` or `1,2,4`.
    /// Cross-validation over `1..8` is used when neither option is given.
    #[arg(long = "K-candidates", value_parser = parse_candidates)]
    pub k_candidates: Option<Candidates>,
    /// Validation periods used when selecting K.
    #[arg(long = "n-validation", default_value_t = fdar::forecast::DEFAULT_VALIDATION_PERIODS)]
    pub n_validation: usize,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub k: KArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Model encoding; defaults to JSON for `.json` paths and binary otherwise.
    #[arg(long)]
    pub format: Option<ModelFormat>,
    /// Scree table path; defaults to the model path with `.scree.csv`.
    #[arg(long)]
    pub scree: Option<PathBuf>,
    /// Also write the estimated densities as a wide CSV.
    #[arg(long)]
    pub densities: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observations whose last period is the forecast origin; the model's
    /// last fitted period is used when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = Kernel::Epanechnikov)]
    pub kernel: Kernel,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Functionals for one-step interval forecasts, e.g. `moment:1`.
    #[arg(long = "functional")]
    pub functionals: Vec<Functional>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Number of residual bootstrap replications.
    #[arg(long = "bootstrap", requires = "seed")]
    pub replications: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Leading progressive and regressive features.
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impulse response of a functional.
    Irf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        functional: Functional,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance decomposition of a functional over the moment basis.
    Vardecomp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        functional: Functional,
        #[arg(long, default_value_t = 4)]
        kmax: usize,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impulse responses and decompositions of the left and right tail probabilities.
    Tails {
        #[arg(long)]
        model: PathBuf,
        /// Left threshold; defaults to the 5% quantile of the mean density.
        #[arg(long, allow_negative_numbers = true)]
        lower: Option<f64>,
        /// Right threshold; defaults to the 95% quantile of the mean density.
        #[arg(long, allow_negative_numbers = true)]
        upper: Option<f64>,
        #[arg(long, default_value_t = 4)]
        kmax: usize,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long = "n-test", default_value_t = 50)]
    pub n_test: usize,
    #[arg(long = "K-candidates", value_parser = parse_candidates, default_value = "1..8")]
    pub k_candidates: Candidates,
    #[arg(long = "n-validation", default_value_t = fdar::forecast::DEFAULT_VALIDATION_PERIODS)]
    pub n_validation: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Period label written next to each draw.
    #[arg(long, default_value = "1")]
    pub period: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Candidate truncation levels given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates(pub Vec<usize>);

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_candidates(s: &str) -> Result<Candidates, String> {
    let bad = || format!("expected a range like 1..8 or a list like 1,2,4, got '{s}'");
    let out: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err("candidates must be nonempty and at least 1".into());
    }
    Ok(Candidates(out))
}
