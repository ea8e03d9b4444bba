mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use quest_core::par::Exec;

use crate::commands::{Analysis, Ctx};
use crate::config::RunConfig;
use crate::error::CliError;

/// Low-bit diffusion quantization with time-aware quantizers and selective finetuning.
#[derive(Parser)]
#[command(name = "quest", version)]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set quant.bits_w=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for every random stream (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `paths.out_dir`).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Load artifacts written under a different configuration.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher.
    TeacherTrain,
    /// Record teacher trajectories at the sampled steps.
    Calibrate,
    /// Build the PTQ baseline with time-aware activation quantizers.
    Quantize,
    /// Run both selective finetuning stages.
    Finetune,
    /// Sample from a checkpoint and report trajectory MSE-to-teacher.
    Sample {
        /// Defaults to the finetuned checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write an analysis report.
    Analyze {
        #[arg(value_enum)]
        which: Analysis,
    },
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!(
            "paths.out_dir={}",
            toml::Value::String(o.display().to_string())
        ));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let ctx = Ctx {
        cfg,
        allow_mismatch: cli.allow_config_mismatch,
        force: cli.force,
        exec,
    };
    match cli.command {
        Command::TeacherTrain => commands::teacher_train(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Quantize => commands::quantize(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::Sample {
            checkpoint,
            samples,
        } => commands::sample_cmd(&ctx, checkpoint.as_deref(), samples),
        Command::Analyze { which } => commands::analyze(&ctx, which),
        Command::Config => {
            print!("{}", ctx.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
