use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmark::commands::{cmd_bench_agg, cmd_generate, cmd_pretrain, cmd_run, RunFlags};
use fedmark::config::{preset, ExperimentConfig, PRESET_NAMES};
use fedmark::error::{Error, Result};

/// Federated data-provenance simulator: watermarked synthetic text, federated
/// fine-tuning, robust aggregation and radioactivity detection.
#[derive(Parser)]
#[command(name = "fedmark", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the worker thread count.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator and initial global model; write checkpoints.
    Pretrain(ConfigArgs),
    /// Materialize client datasets (watermarked / clean) to disk.
    Generate(ConfigArgs),
    /// Run the federated experiment and write reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dump raw per-round update vectors and filter projections.
        #[arg(long)]
        dump_updates: bool,
        /// Continue from the last persisted round state.
        #[arg(long)]
        resume: bool,
    },
    /// Synthetic corrupted-Gaussian benchmark of the robust aggregator.
    BenchAgg(ConfigArgs),
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (Some(_), Some(_)) => {
            return Err(Error::Config("--config and --preset are mutually exclusive".into()))
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "either --config <FILE> or --preset <NAME> is required \
                 (presets: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        // Ignore the error if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(&resolve_config(&args)?),
        Command::Generate(args) => cmd_generate(&resolve_config(&args)?),
        Command::Run { config, dump_updates, resume } => {
            let cfg = resolve_config(&config)?;
            cmd_run(&cfg, &RunFlags { dump_updates, resume })
        }
        Command::BenchAgg(args) => cmd_bench_agg(&resolve_config(&args)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
