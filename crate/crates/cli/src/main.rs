mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use commands::{EvalArgs, ExplainArgs, GenDataArgs, StatsArgs, TrainArgs};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "egt", version, about = "Explanation-guided few-shot learning experiments", args_override_self = true)]
struct Cli {
    /// Worker threads for parallel evaluation (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Cmd {
    #[command(flatten)]
    Run(Command),
    /// Re-run a command from the config echo it wrote.
    Replay {
        config: PathBuf,
    },
}

/// A command with every flag resolved; this is what the config echo stores.
#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate synthetic image domains as EGTD files.
    GenData(GenDataArgs),
    /// Train a few-shot model episodically.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Render relevance heatmaps for one query of a sampled episode.
    Explain(ExplainArgs),
    /// Per-image encoder feature statistics.
    Stats(StatsArgs),
}

/// An invalid combination of flags that clap cannot express.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use egt::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Contract(_) => EXIT_USAGE,
                E::NonFinite { .. } | E::Numeric(_) | E::Degenerate(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .context("starting worker pool")?;
    let command = match cli.command {
        Cmd::Run(c) => c,
        Cmd::Replay { config } => {
            let text = std::fs::read(&config).with_context(|| format!("reading {}", config.display()))?;
            serde_json::from_slice(&text).with_context(|| format!("parsing config echo {}", config.display()))?
        }
    };
    commands::execute(command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
