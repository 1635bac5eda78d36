//! `psf-unmix` command-line driver.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or conditioning
//! failure, 64 usage error.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// A failed run, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<psf_unmix_core::Error> for Failure {
    fn from(e: psf_unmix_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "psf-unmix", version, about = "VarPro PSF unmixing: radius maps, Monte Carlo studies and LIBS fits")]
pub struct Cli {
    /// TOML configuration (`schema_version = 1`); missing sections use defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory for CSV/JSON results and `manifest.json`.
    #[arg(long, global = true, value_name = "DIR", default_value = "psf-unmix-out")]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Strong-basin radius bound over a (θ*, Δ) grid for each kernel.
    RadiusMap,
    /// Empirical convergence and strong-convexity radii versus the bound.
    MonteCarlo,
    /// Mean squared error of θ̂ against the Cramér-Rao bound over SNR.
    MseSnr,
    /// Coherence μ and total coherence 𝒞 of one kernel pair over Δ.
    Coherence,
    /// Calibration-free LIBS fit of one spectrum.
    Fit(FitArgs),
    /// Derivative, projector, gradient/Hessian and Gramian-bound self-tests.
    Check,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Spectrum CSV with header `wavelength_nm,intensity`.
    #[arg(long, value_name = "PATH")]
    pub spectrum: Option<PathBuf>,
    /// Line list CSV `species,wavelength_nm,a_ki,g_k,e_k_ev`.
    #[arg(long, value_name = "PATH")]
    pub lines: Option<PathBuf>,
    /// Partition-function JSON.
    #[arg(long, value_name = "PATH")]
    pub partition: Option<PathBuf>,
    /// Fit window `lo:hi` in nm (default: the whole spectrum).
    #[arg(long, value_name = "LO:HI")]
    pub window: Option<String>,
    /// `lorentzian`, `gaussian` or `u-laplace:<u>`.
    #[arg(long, default_value = "lorentzian")]
    pub profile: String,
    /// Fit a constant-offset column as well.
    #[arg(long)]
    pub baseline: bool,
    /// Instead of reading files, forward-model the built-in synthetic alloy
    /// at this SNR (dB) and write its inputs next to the results.
    #[arg(long, value_name = "DB", conflicts_with_all = ["spectrum", "lines", "partition"])]
    pub synthetic_snr: Option<f64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::RadiusMap => "radius-map",
            Command::MonteCarlo => "monte-carlo",
            Command::MseSnr => "mse-snr",
            Command::Coherence => "coherence",
            Command::Fit(_) => "fit",
            Command::Check => "check",
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("PSF_UNMIX_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let mut ctx = manifest::RunContext::new(cli.out.clone(), cli.command.name(), cli.seed, threads);
    let result = if threads == 0 {
        Err(Failure::Validation("--threads must be at least 1".into()))
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(|| commands::dispatch(&cli, &mut ctx)),
            Err(e) => Err(Failure::Runtime(format!("cannot start worker pool: {e}"))),
        }
    };
    if let Err(f) = &result {
        eprintln!("psf-unmix {}: {f}", cli.command.name());
    }
    let code = result.as_ref().err().map_or(EXIT_OK, Failure::exit_code);
    match ctx.finish(&result) {
        Ok(path) => log::info!("manifest written to {}", path.display()),
        Err(e) => {
            eprintln!("psf-unmix: {e}");
            return code.max(EXIT_RUNTIME);
        }
    }
    code
}
