//! `pnp-unmix` command-line tool.
//!
//! Exit codes: 0 success, 2 bad arguments, configuration or input values,
//! 3 shape mismatch, 4 numerical failure, 5 file system error.
//!
//! `PNP_UNMIX_THREADS` sets the worker count (unset or 0 uses every core).

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnp_unmix::Error;

pub const THREADS_ENV: &str = "PNP_UNMIX_THREADS";

#[derive(Parser)]
#[command(
    name = "pnp-unmix",
    version,
    about = "Plug-and-play hyperspectral unmixing"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle.
    Synth(SynthArgs),
    /// Estimate abundances for a cube.
    Unmix(Box<UnmixArgs>),
    /// Score an abundance estimate.
    Eval(EvalArgs),
    /// Apply a denoiser to a cube.
    Denoise(DenoiseArgs),
}

/// Flags mirror config-file keys one to one; flags win over the file.
#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// Scene config file (`key = value`).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub cols: Option<String>,
    #[arg(long)]
    pub endmembers: Option<String>,
    #[arg(long)]
    pub bands: Option<String>,
    /// Spatial smoothness of the abundance fields, in pixels.
    #[arg(long)]
    pub smoothness: Option<String>,
    #[arg(long)]
    pub pure_fraction: Option<String>,
    /// Noise level in dB, or `inf` for a clean scene.
    #[arg(long)]
    pub snr: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct UnmixArgs {
    /// Run config file (`key = value`).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Observed cube.
    #[arg(long)]
    pub cube: Option<String>,
    /// Endmember CSV.
    #[arg(long)]
    pub endmembers: Option<String>,
    /// Ground-truth abundances, enables RMSE and PSNR.
    #[arg(long)]
    pub truth: Option<String>,
    /// Noiseless cube, PSNR reference when no truth is given.
    #[arg(long)]
    pub clean: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// `pnp` or `fcls`.
    #[arg(long)]
    pub method: Option<String>,
    /// `pro-h` or `pro-a`.
    #[arg(long)]
    pub mode: Option<String>,
    /// identity, gaussian, nlm or tv.
    #[arg(long)]
    pub denoiser: Option<String>,
    /// `table` or `low-snr`; needs `--snr`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Scene SNR in dB; selects the preset row and labels the metrics.
    #[arg(long)]
    pub snr: Option<String>,
    #[arg(long)]
    pub rho: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub iters: Option<String>,
    /// 0 always runs all iterations.
    #[arg(long)]
    pub stop_tol: Option<String>,
    #[arg(long)]
    pub qp_tol: Option<String>,
    #[arg(long)]
    pub qp_max_iter: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[command(flatten)]
    pub denoiser_params: DenoiserParams,
    /// Write one graymap per endmember.
    #[arg(long)]
    pub maps: Option<String>,
    #[arg(long)]
    pub metrics: Option<String>,
    #[arg(long)]
    pub trace: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct DenoiserParams {
    #[arg(long)]
    pub kernel_sigma: Option<String>,
    #[arg(long)]
    pub patch_size: Option<String>,
    #[arg(long)]
    pub search_size: Option<String>,
    #[arg(long)]
    pub h_factor: Option<String>,
    #[arg(long)]
    pub tv_iters: Option<String>,
    #[arg(long)]
    pub tv_weight: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Abundance estimate to score.
    #[arg(long)]
    pub estimate: Option<String>,
    #[arg(long)]
    pub endmembers: Option<String>,
    /// Observed cube, for the reconstruction error.
    #[arg(long)]
    pub cube: Option<String>,
    #[arg(long)]
    pub truth: Option<String>,
    #[arg(long)]
    pub clean: Option<String>,
    /// Method label for the record.
    #[arg(long)]
    pub method: Option<String>,
    /// SNR label for the record.
    #[arg(long)]
    pub snr: Option<String>,
    /// Output JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub cube: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub denoiser: Option<String>,
    /// Noise level handed to the denoiser.
    #[arg(long)]
    pub sigma: Option<String>,
    #[command(flatten)]
    pub denoiser_params: DenoiserParams,
}

/// An error tagged with the stage it came from.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

pub fn at(stage: &'static str) -> impl FnOnce(Error) -> Failure {
    move |error| Failure { stage, error }
}

pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Parse { .. } | Error::InvalidInput(_) => 2,
        Error::Shape(_) => 3,
        Error::NonFinite { .. } | Error::Indefinite { .. } | Error::Generation(_) => 4,
        Error::Io { .. } => 5,
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| Failure {
        stage: "setup",
        error: Error::InvalidInput(format!("{THREADS_ENV}={raw:?}")),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            stage: "setup",
            error: Error::InvalidInput(e.to_string()),
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Unmix(a) => commands::unmix(*a),
        Command::Eval(a) => commands::eval(a),
        Command::Denoise(a) => commands::denoise(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.stage, f.error);
            ExitCode::from(exit_code(&f.error))
        }
    }
}
