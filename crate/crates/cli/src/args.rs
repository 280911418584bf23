use clap::{Args, Parser, Subcommand, ValueEnum};

/// Largest accepted `--samples`.
pub const MAX_SAMPLES: u64 = 1 << 40;

#[derive(Debug, Parser)]
#[command(name = "mcdp", version, about = "Monte Carlo privacy accounting and verification")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MCDP_THREADS")]
    pub threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate delta(eps) or eps(delta).
    #[command(subcommand)]
    Account(AccountCommand),
    /// Estimate-verify-release gate for a proposed (eps, delta).
    Verify(VerifyArgs),
    /// Analytic moment bounds.
    #[command(subcommand)]
    Bound(BoundCommand),
    /// Ground-truth oracles.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Debug, Subcommand)]
pub enum AccountCommand {
    Offline(OfflineArgs),
    Online(OnlineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Gaussian,
    SubsampledGaussian,
}

#[derive(Debug, Clone, Args)]
pub struct MechanismArgs {
    #[arg(long, value_enum)]
    pub mechanism: MechanismArg,
    #[arg(long)]
    pub sigma: f64,
    /// Sampling rate; ignored (and forced to 1) for the plain Gaussian.
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Smc,
    Is,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleMode {
    None,
    Auto,
}

#[derive(Debug, Clone, Args)]
#[group(id = "target", required = true, multiple = false)]
pub struct Target {
    #[arg(long, group = "target", allow_negative_numbers = true)]
    pub eps: Option<f64>,
    #[arg(long, group = "target")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long, value_enum, default_value_t = EstimatorArg::Smc)]
    pub estimator: EstimatorArg,
    /// Sample count; scientific notation such as 1e7 is accepted.
    #[arg(long, value_parser = parse_samples)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = mcdp_core::estimators::DEFAULT_CHUNK_SIZE)]
    pub chunk_size: usize,
}

#[derive(Debug, Args)]
pub struct OfflineArgs {
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[arg(long)]
    pub k: u64,
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Tilting parameter for --estimator is (default: heuristic).
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_enum, default_value_t = OracleMode::None)]
    pub oracle: OracleMode,
}

#[derive(Debug, Args)]
pub struct OnlineArgs {
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[arg(long)]
    pub k_max: u64,
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundArg {
    Smc,
    IsJs,
    IsMax,
    IsHolder,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[arg(long)]
    pub k: u64,
    #[arg(long, allow_negative_numbers = true)]
    pub eps: f64,
    #[arg(long)]
    pub delta_est: f64,
    #[arg(long)]
    pub tau: f64,
    /// Defaults to (1 + tau)/2.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Threshold offset (default: heuristic).
    #[arg(long)]
    pub offset: Option<f64>,
    /// `analytic` or a positive number used as the second-moment bound.
    #[arg(long, default_value = "analytic")]
    pub nu: String,
    /// Analytic bound used when --nu analytic (default: smc for smc, is-holder for is).
    #[arg(long, value_enum)]
    pub bound: Option<BoundArg>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Smc)]
    pub estimator: EstimatorArg,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum BoundCommand {
    SecondMoment(SecondMomentArgs),
}

#[derive(Debug, Args)]
pub struct SecondMomentArgs {
    #[arg(long, value_enum)]
    pub method: BoundArg,
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[arg(long)]
    pub k: u64,
    #[arg(long, allow_negative_numbers = true)]
    pub eps: f64,
    /// Order of the SMC moment (2 for the second moment).
    #[arg(long, default_value_t = 2.0)]
    pub u: f64,
    #[arg(long, conflicts_with = "theta_grid")]
    pub theta: Option<f64>,
    /// `lo:hi:n`, geometric.
    #[arg(long, value_parser = parse_grid)]
    pub theta_grid: Option<(f64, f64, usize)>,
    /// Comma-separated integer orders.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<u32>>,
    /// Comma-separated Hölder exponents; `inf` selects the max bound.
    #[arg(long, value_delimiter = ',')]
    pub a_grid: Option<Vec<f64>>,
    /// Second-moment bound of simple Monte Carlo fed to is-js (default: the smc bound).
    #[arg(long)]
    pub nu_mc: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Closed form for the composed Gaussian mechanism.
    GaussianExact {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        k: u64,
        #[arg(long, allow_negative_numbers = true)]
        eps: f64,
    },
    /// Adaptive quadrature for a single step (the Gaussian reduces k steps to one).
    Quadrature {
        #[command(flatten)]
        mechanism: MechanismArgs,
        #[arg(long, default_value_t = 1)]
        k: u64,
        #[arg(long, allow_negative_numbers = true)]
        eps: f64,
        #[arg(long, default_value_t = 1e-10)]
        rel_tol: f64,
    },
    /// Certified lattice-convolution bracket.
    Convolution {
        #[command(flatten)]
        mechanism: MechanismArgs,
        #[arg(long)]
        k: u64,
        #[arg(long, allow_negative_numbers = true)]
        eps: f64,
        #[arg(long, default_value_t = 5e-4)]
        step: f64,
    },
}

pub fn parse_samples(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v >= 1.0) || v.fract() != 0.0 {
        return Err(format!("`{s}` is not a positive integer"));
    }
    if v > MAX_SAMPLES as f64 {
        return Err(format!("{s} samples exceeds the cap of 2^40"));
    }
    Ok(v as u64)
}

pub fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err("expected lo:hi:n".into());
    }
    let lo = parts[0].parse::<f64>().map_err(|e| e.to_string())?;
    let hi = parts[1].parse::<f64>().map_err(|e| e.to_string())?;
    let n = parts[2].parse::<usize>().map_err(|e| e.to_string())?;
    Ok((lo, hi, n))
}
