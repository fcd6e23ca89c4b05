use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ddc_cli::commands::{self, SweepAxis};
use ddc_cli::config::{Overrides, RunConfig, StepsTarget};
use ddc_core::error::Error;

#[derive(Parser)]
#[command(
    name = "ddc",
    version,
    about = "Diffusion-based image restoration with a trained consistency residual"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the denoising diffusion backbone.
    TrainDenoiser(Common),
    /// Train the consistency residual against a frozen denoiser.
    TrainDdc(Common),
    /// Restore degraded measurements and report metrics.
    Solve(Common),
    /// Compare predicted-noise kurtosis across baseline strategies.
    DiagnoseKurtosis(Common),
    /// Evaluate across sampler step counts or noise levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Which axis to vary.
        #[arg(long, value_enum, default_value_t = SweepAxis::Steps)]
        axis: SweepAxis,
    },
}

fn load(common: &Common, target: StepsTarget) -> ddc_core::error::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply(&common.overrides, target);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> ddc_core::error::Result<()> {
    match &cli.cmd {
        Cmd::TrainDenoiser(c) => commands::train_denoiser_cmd(&load(c, StepsTarget::TrainDenoiser)?),
        Cmd::TrainDdc(c) => commands::train_ddc_cmd(&load(c, StepsTarget::TrainDdc)?),
        Cmd::Solve(c) => commands::solve_cmd(&load(c, StepsTarget::Sampler)?),
        Cmd::DiagnoseKurtosis(c) => commands::diagnose_cmd(&load(c, StepsTarget::Sampler)?),
        Cmd::Sweep { common, axis } => {
            commands::sweep_cmd(&load(common, StepsTarget::Sampler)?, *axis)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGrad { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 2,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(raw) = std::env::var("DDC_THREADS") {
        let threads: usize = match raw.parse() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: DDC_THREADS must be a positive integer, got {raw:?}");
                std::process::exit(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            std::process::exit(2);
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
