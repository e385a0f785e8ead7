//! `fewshot-crf` command line: sample episodes, train, evaluate, analyze.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fewshot_crf::emission::Scorer;
use fewshot_crf::error::{Error, ErrorClass};
use fewshot_crf::model::Decoder;

use crate::commands::{analyze_cmd, eval_cmd, sample, train_cmd, EvalOverrides, TrainOverrides};
use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-crf",
    version,
    about = "Few-shot sequence labeling with a transferable CRF"
)]
struct Cli {
    /// Threads for episode-level parallelism; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Analysis {
    Bigrams,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/dev/test episode files for the configured domain split.
    Sample(ConfigArg),
    /// Train on the sampled train episodes.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Freeze the transition table at zero.
        #[arg(long)]
        no_transition: bool,
        #[arg(long)]
        scorer: Option<Scorer>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the checkpoint on the test episodes.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        decoder: Option<Decoder>,
        #[arg(long, value_enum)]
        analysis: Option<Analysis>,
        /// Pool span counts over an episode instead of averaging per sample.
        #[arg(long)]
        pooled: bool,
    },
    /// Evaluate with every decoder, including the bigram breakdown.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pooled: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--workers: {e}")))?;
    }
    match cli.command {
        Command::Sample(c) => sample(&RunConfig::load(&c.config)?),
        Command::Train {
            config,
            no_transition,
            scorer,
            resume,
        } => {
            let overrides = TrainOverrides {
                no_transition,
                scorer,
                resume,
            };
            train_cmd(&RunConfig::load(&config.config)?, &overrides).map(drop)
        }
        Command::Eval {
            config,
            decoder,
            analysis,
            pooled,
        } => {
            let overrides = EvalOverrides {
                decoder,
                bigrams: analysis.is_some(),
                pooled,
            };
            eval_cmd(&RunConfig::load(&config.config)?, &overrides).map(drop)
        }
        Command::Analyze { config, pooled } => analyze_cmd(&RunConfig::load(&config.config)?, pooled).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
