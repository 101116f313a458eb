//! `distill` — operator surface for the prefix-distillation pipeline.
//!
//! Subcommands: `truncate` (prefix decisions), `build` (aligned SFT dataset),
//! `analyze` (entropy / lengths / search-counts / quality), `eval` (pass@k),
//! `validate` (config diagnostics). Exit codes: 0 success, 1 runtime failure,
//! 2 config error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::{BackendKind, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

#[derive(Parser)]
#[command(name = "distill", version, about = "Prefix-aligned reasoning distillation pipeline")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Override paths.run_dir from the config file.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override options.seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the mock backend (backend.script_path must be set).
    #[arg(long, global = true)]
    mock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured truncation strategy and write decisions.jsonl.
    Truncate,
    /// Build the aligned SFT dataset (decisions, audit, dataset, summary).
    Build,
    /// Run one analysis over persisted records or scored trajectories.
    Analyze {
        #[arg(value_enum)]
        which: AnalyzeKind,
    },
    /// Sample k answers per problem and score pass@1 / pass@k.
    Eval,
    /// Check the configuration and referenced files; print diagnostics.
    Validate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnalyzeKind {
    Entropy,
    Lengths,
    #[value(name = "search-counts")]
    SearchCounts,
    Quality,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(&cli.config).map_err(CliError::Config)?;
    if let Some(run_dir) = cli.run_dir {
        config.paths.run_dir = run_dir;
    }
    if let Some(seed) = cli.seed {
        config.options.seed = seed;
    }
    if cli.mock {
        config.backend.kind = BackendKind::Mock;
    }

    match cli.command {
        Command::Validate => commands::cmd_validate(&config),
        Command::Truncate => {
            let pipeline = commands::Pipeline::from_config(config)?;
            commands::cmd_truncate(&pipeline)
        }
        Command::Build => {
            let pipeline = commands::Pipeline::from_config(config)?;
            commands::cmd_build(&pipeline)
        }
        Command::Analyze { which } => {
            let pipeline = commands::Pipeline::from_config(config)?;
            commands::cmd_analyze(&pipeline, which)
        }
        Command::Eval => {
            let pipeline = commands::Pipeline::from_config(config)?;
            commands::cmd_eval(&pipeline)
        }
    }
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Config(message)) => {
            eprintln!("config error:\n{message}");
            2
        }
        Err(CliError::Runtime(error)) => {
            eprintln!("error: {error:#}");
            1
        }
    };
    std::process::exit(code);
}
