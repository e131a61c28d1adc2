//! `prefgate` command line: one subcommand per pipeline stage, all sharing
//! one resolved [`RunConfig`].

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use config::{ConfigFlags, RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "prefgate", version, about = "Reference-model-guided preference pair sampling and DPO")]
pub struct Cli {
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic SFT corpus and the train/held-out preference sets.
    Gen,
    /// Train the reference model on the SFT corpus.
    Sft,
    /// Annotate training pairs with reference log-probability gaps.
    Score,
    /// Keep scored pairs whose gap reaches --delta (or the --retain quantile).
    Sample,
    /// Clarity-vs-threshold curve over --deltas, as CSV and SVG.
    Analyze,
    /// Train the policy with DPO against the frozen reference.
    Dpo,
    /// Held-out preference accuracy of the policy.
    Eval,
    /// Finite-difference check of the CE and DPO gradients.
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Sft => "sft",
            Command::Score => "score",
            Command::Sample => "sample",
            Command::Analyze => "analyze",
            Command::Dpo => "dpo",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 usage or config error, 2 data or numeric
/// error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();

    let env_seed = std::env::var(SEED_ENV).ok();
    let result = RunConfig::resolve(&cli.flags, env_seed.as_deref())
        .and_then(|cfg| commands::execute(cli.command, &cfg, cli.flags.config.as_deref()));
    match result {
        Ok(()) => 0,
        Err(err) => {
            let _ = writeln!(std::io::stderr(), "prefgate {}: {err}", cli.command.name());
            err.exit_code()
        }
    }
}
