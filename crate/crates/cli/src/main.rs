//! `rehit`: train, run and evaluate the shadow-removal network.

mod commands;
mod config;
mod error;
mod pad;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rehit::data::ShadowConfig;

use crate::config::{NumericMode, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "rehit",
    version,
    about = "Mask-free shadow removal with a Retinex-guided histogram transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes checkpoints, a metric log and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set train.iters=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Remove shadows from every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Run config with the model section (defaults to config.toml beside the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<NumericMode>,
    },
    /// Compare predictions with ground truth (files matched by name).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate synthetic shadowed/clean pairs with a manifest and decomposition sidecars.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ShadowConfig::default().count)]
        shadows: usize,
        #[arg(long, default_value_t = ShadowConfig::default().attenuation)]
        attenuation: f64,
        #[arg(long, default_value_t = ShadowConfig::default().softness)]
        softness: f64,
        #[arg(long, default_value_t = ShadowConfig::default().reflectance_amplitude)]
        reflectance_amplitude: f64,
    },
    /// Print parameter counts and FLOPs for a model config.
    Inspect {
        /// Run config file; the full default model is used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
    /// Central-difference gradient checks (exit 0 iff every check passes).
    Gradcheck {
        /// `all` or one of tensor_nn, hist_attention, blocks, retinex, model, training.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Corrupt one operator's gradient rule (test fixture).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, overrides } => commands::train(&RunConfig::load(&config, &overrides)?),
        Command::Infer {
            checkpoint,
            input,
            output,
            config,
            mode,
        } => {
            if !checkpoint.is_file() {
                return Err(CliError::new(
                    CliError::CHECKPOINT,
                    format!("checkpoint {} not found", checkpoint.display()),
                ));
            }
            let mut cfg = commands::config_for_checkpoint(&checkpoint, config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            commands::infer(&cfg, &checkpoint, &input, &output)
        }
        Command::Eval { pred, gt, csv } => commands::eval(&pred, &gt, csv.as_deref()),
        Command::Synth {
            n,
            size,
            seed,
            out,
            shadows,
            attenuation,
            softness,
            reflectance_amplitude,
        } => {
            let shadow = ShadowConfig {
                count: shadows,
                softness,
                attenuation,
                reflectance_amplitude,
            };
            commands::synth(n, size, seed, &out, &shadow)
        }
        Command::Inspect {
            config,
            overrides,
            height,
            width,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p, &overrides)?,
                None => RunConfig::parse("", "defaults", &overrides)?,
            };
            commands::inspect(&cfg, height, width)
        }
        Command::Gradcheck { scope, inject_fault } => commands::gradcheck(&scope, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("REHIT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                rehit::par::init_threads(n);
            }
            _ => {
                eprintln!("error: REHIT_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(CliError::CONFIG);
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
