use clap::{Parser, Subcommand};
use fedct_cli::commands;
use fedct_cli::config::{preset, ExperimentConfig};
use fedct_cli::{set_thread_count, CliError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fedct",
    about = "Federated low-dose CT reconstruction simulator",
    version
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in experiment preset (desk4, paper8).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Output root directory (defaults to the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the federation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap (1 = fully serial).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the per-client low-dose/reference datasets.
    Simulate,
    /// Run federated training on simulated datasets.
    Train,
    /// Evaluate the trained checkpoint on test splits.
    Eval {
        /// Restrict to these client ids (comma-separated).
        #[arg(long, value_delimiter = ',')]
        clients: Vec<u32>,
        /// Export prediction/input/reference images as PGM.
        #[arg(long)]
        dump_images: bool,
    },
    /// Route unseen protocols through the protocol codebook.
    InferUnseen,
    /// Verify every operator and composed model path against central
    /// finite differences.
    Gradcheck {
        /// Corrupt one analytic gradient to prove failures are detected.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Rebuild and write the protocol codebook dump.
    DumpCodebook {
        /// Target file (defaults to <out>/run/codebook.txt).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), None) => ExperimentConfig::load(path).map_err(CliError::Config)?,
        (None, Some(name)) => preset(name).map_err(CliError::Config)?,
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give either --config or --preset, not both".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "a config is required: pass --config PATH or --preset NAME".into(),
            ))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.federation.seed = seed;
        cfg.dataset.seed = seed;
    }
    Ok(cfg)
}

fn out_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_thread_count(cli.threads);
    match &cli.command {
        Command::Simulate => {
            let cfg = resolve_config(&cli)?;
            commands::cmd_simulate(&cfg, &out_root(&cli, &cfg))
        }
        Command::Train => {
            let cfg = resolve_config(&cli)?;
            commands::cmd_train(&cfg, &out_root(&cli, &cfg)).map(|_| ())
        }
        Command::Eval {
            clients,
            dump_images,
        } => {
            let root = eval_root(&cli)?;
            commands::cmd_eval(&root, clients, *dump_images).map(|_| ())
        }
        Command::InferUnseen => {
            let root = eval_root(&cli)?;
            let overrides = match (&cli.config, &cli.preset) {
                (None, None) => None,
                _ => Some(resolve_config(&cli)?.unseen),
            };
            commands::cmd_infer_unseen(&root, overrides.as_deref()).map(|_| ())
        }
        Command::Gradcheck { inject_bug } => {
            if commands::cmd_gradcheck(*inject_bug) {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient checks failed".into()))
            }
        }
        Command::DumpCodebook { file } => {
            let root = eval_root(&cli)?;
            commands::cmd_dump_codebook(&root, file.as_deref()).map(|_| ())
        }
    }
}

/// Commands that read a finished run accept --out directly or fall back to
/// the config's output dir.
fn eval_root(cli: &Cli) -> Result<PathBuf, CliError> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    let cfg = resolve_config(cli)?;
    Ok(PathBuf::from(&cfg.output.dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedct: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
