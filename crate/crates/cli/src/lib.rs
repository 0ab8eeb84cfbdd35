//! `iscr`: generate corpora, train and evaluate agents, compare user
//! behavior, and serve live sessions.
//!
//! Exit status: 0 success, 1 usage, 2 bad input data or configuration,
//! 3 runtime failure.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;

pub use commands::{behavior_report, metrics_row};

#[derive(Debug, Parser)]
#[command(name = "iscr", version, about = "Interactive spoken content retrieval with learned dialogue agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override one config value, e.g. `--set schedule.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted topics.
    Gen {
        /// Output directory for corpus.jsonl, queries.jsonl and topics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Generator parameters (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train the manager and user on one cross-validation split.
    Train(ConfigArgs),
    /// Evaluate saved agents on every test fold.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory; defaults to `<output_dir>/checkpoints`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full k-fold training and testing.
    Crossval(ConfigArgs),
    /// Compare document-choice behavior of simulated and human users.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with learned user checkpoints to include.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Choice log written by the session service; repeatable.
        #[arg(long)]
        human: Vec<PathBuf>,
        /// Episode traces to draw scenarios from instead of first-pass lists.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Serve live sessions and human-evaluation tasks over HTTP.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<iscr_core::Error> for CliError {
    fn from(e: iscr_core::Error) -> Self {
        let missing_input = matches!(&e, iscr_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
        if e.is_data_error() || missing_input {
            CliError::Data(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { out, config, set } => commands::gen(&out, config.as_deref(), &set),
        Command::Train(c) => commands::train(&c),
        Command::Eval { config, checkpoint } => commands::eval(&config, checkpoint),
        Command::Crossval(c) => commands::crossval(&c),
        Command::Compare {
            config,
            checkpoint,
            human,
            traces,
        } => commands::compare(&config, checkpoint, &human, traces),
        Command::Serve { config, checkpoint, addr } => commands::serve(&config, checkpoint, addr),
    }
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("iscr: {e}");
            e.exit_code()
        }
    }
}
