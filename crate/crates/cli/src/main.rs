//! `ptr` — build refinement datasets, check the loss, validate weak/strong
//! separation, and run and score refinement loops.
//!
//! Exit codes: 0 success, 1 contract violation, 2 config error, 3 provider
//! failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::{BuildArgs, CleanArgs, EmitTrainArgs, EvalArgs, LossCheckArgs, RefineArgs, SeparationArgs};

#[derive(Debug, Parser)]
#[command(name = "ptr", version, about = "Progressive thought refinement toolkit")]
struct Cli {
    /// error, warn, info, debug or trace. Debug and trace emit JSON lines.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean, deduplicate and leakage-filter raw records.
    Clean(CleanArgs),
    /// Run the whole dataset build from one config file.
    Build(BuildArgs),
    /// Wilcoxon signed-rank test on paired weak/strong scores.
    ValidateSeparation(SeparationArgs),
    /// Re-emit masked training examples from an existing build.
    EmitTrain(EmitTrainArgs),
    /// Run multi-iteration refinement sessions.
    Refine(RefineArgs),
    /// Score refinement sessions and print the per-iteration table.
    Eval(EvalArgs),
    /// Evaluate loss cases and gradient-check the toy model.
    LossCheck(LossCheckArgs),
}

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Contract = 1,
    Config = 2,
    Provider = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

pub trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn init_logging(level: &str) -> Result<(), Failure> {
    let filter = EnvFilter::try_new(level).or_exit(Exit::Config)?;
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if matches!(level, "debug" | "trace") {
        builder.json().init();
    } else {
        builder.init();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_logging(&cli.log_level)?;
    match cli.command {
        Command::Clean(a) => commands::clean(a),
        Command::Build(a) => commands::build(a),
        Command::ValidateSeparation(a) => commands::validate_separation(a),
        Command::EmitTrain(a) => commands::emit_train(a),
        Command::Refine(a) => commands::refine(a),
        Command::Eval(a) => commands::eval(a),
        Command::LossCheck(a) => commands::loss_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Exit::Config as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}
