//! `scpo`: generate data, train forecasters, run policy experiments and render
//! reports.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "scpo", version, about = "Scenario predict-then-optimize for online inventory routing")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a demand dataset and retailer-group instances into `data_dir`.
    Gen,
    /// Train the forecasters on the dataset's training split into `model_dir`.
    Train,
    /// Evaluate the policies on every instance and write reports to `out_dir`.
    Run,
    /// Print the metric table of one or more report files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Error with a stable machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("E_CONFIG", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new("E_IO", message)
    }

    pub fn exit_code(&self) -> u8 {
        match self.code {
            "E_USAGE" => 2,
            "E_CONFIG" => 3,
            "E_IO" => 4,
            "E_FORMAT" => 5,
            "E_INPUT" => 6,
            "E_SHAPE" => 7,
            "E_NUMERIC" => 8,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl From<scpo_core::Error> for CliError {
    fn from(e: scpo_core::Error) -> Self {
        use scpo_core::Error as E;
        let code = match &e {
            E::Io(_) => "E_IO",
            E::Json(_) | E::Format { .. } => "E_FORMAT",
            E::Shape(_) => "E_SHAPE",
            E::NonFiniteLoss { .. } | E::NotEvaluated => "E_NUMERIC",
            E::Infeasible(_) => "E_INFEASIBLE",
            E::InvalidInstance(_) | E::InvalidInput(_) => "E_INPUT",
        };
        CliError::new(code, e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Report { files } = &cli.command {
        return commands::report(files);
    }
    let cfg = RunConfig::resolve(&cli.overrides)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Run => commands::run(&cfg),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::new("E_USAGE", e.kind().to_string()));
            eprint!("{}", e.render());
            return ExitCode::from(2);
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
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
