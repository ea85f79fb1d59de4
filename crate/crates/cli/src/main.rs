//! `promptmatch` command-line tool.
//!
//! Exit codes: 0 success, 1 data or validation failure, 2 usage error,
//! 3 backend or runtime failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "promptmatch", version, about = "Learn which few-shot exemplars to put in front of an LLM query")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pool (or query) file and report record errors.
    PoolValidate {
        path: PathBuf,
    },
    /// Generate a synthetic clustered task with a rule-based LLM oracle.
    Synth(commands::SynthArgs),
    /// Train a selection policy with REINFORCE.
    Train(RunConfig),
    /// Score a selector on a query file.
    Eval(RunConfig),
    /// Pick exemplars for one query with a trained policy.
    Match(commands::MatchArgs),
    /// Send one input to the configured backend and print the response.
    Smoke(commands::SmokeArgs),
}

/// A failed command, classified by exit code.
pub enum Failure {
    /// Bad data: unparseable files, failed validation, inconsistent shapes.
    Data(anyhow::Error),
    /// Missing or conflicting flags and configuration.
    Usage(String),
    /// The LLM backend or the training run itself failed.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Data(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
            Failure::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<promptmatch_core::Error> for Failure {
    fn from(err: promptmatch_core::Error) -> Self {
        use promptmatch_core::Error as E;
        match err.root() {
            E::Config(_) => Failure::Usage(err.to_string()),
            E::Backend(_) | E::NonFinite(_) => Failure::Runtime(err.into()),
            _ => Failure::Data(err.into()),
        }
    }
}

impl From<promptmatch_core::BackendError> for Failure {
    fn from(err: promptmatch_core::BackendError) -> Self {
        match err {
            promptmatch_core::BackendError::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::PoolValidate { path } => commands::pool_validate(&path),
        Command::Synth(args) => commands::synth(&args),
        Command::Train(cfg) => commands::train(cfg),
        Command::Eval(cfg) => commands::eval(cfg),
        Command::Match(args) => commands::match_query(args),
        Command::Smoke(args) => commands::smoke(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
