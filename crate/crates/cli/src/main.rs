//! `griffonforge`: filter → annotate → serve → export → eval.
//!
//! Exit codes: 0 ok, 1 other error, 2 schema error, 3 transport failures,
//! 4 port in use, 5 accuracy below the floor.

mod annotate;
mod error;
mod eval;
mod filter;
mod io;
mod serve;
mod settings;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing::Level;

use crate::error::CliError;
use crate::settings::Settings;

#[derive(Debug, Parser)]
#[command(
    name = "griffonforge",
    version,
    about = "Grounded visual-reasoning data engine and evaluation toolkit"
)]
struct Cli {
    /// Flat TOML settings file; GRIFFONFORGE_<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Keep QA pairs that need grounded visual reasoning.
    Filter(filter::FilterArgs),
    /// Run the expert model over QA pairs to produce review samples.
    Annotate(annotate::AnnotateArgs),
    /// Serve the human review API.
    Serve(serve::ServeArgs),
    /// Write accepted samples from a data directory.
    Export(serve::ExportArgs),
    /// Evaluate a backend on a benchmark.
    Eval(eval::EvalArgs),
    /// Generate a synthetic benchmark with scene graphs.
    GenBench(eval::GenBenchArgs),
    /// Serve a deterministic stand-in for the expert endpoint.
    FakeExpert(serve::FakeExpertArgs),
}

fn init_logging(level: &str) -> Result<(), CliError> {
    let level: Level = level
        .parse()
        .map_err(|_| CliError::other(format!("unknown log level `{level}`")))?;
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?.with_env(|k| std::env::var(k).ok());
    init_logging(&settings.pick(cli.log_level, "log_level", "info".to_string())?)?;
    let seed = settings.pick(cli.seed, "seed", 0)?;
    match cli.command {
        Command::Filter(a) => filter::run(a, &settings),
        Command::Annotate(a) => annotate::run(a, &settings),
        Command::Serve(a) => serve::serve(a, &settings),
        Command::Export(a) => serve::export(a, &settings),
        Command::Eval(a) => eval::run_eval(a, &settings, seed),
        Command::GenBench(a) => eval::gen_bench(a, &settings, seed),
        Command::FakeExpert(a) => serve::fake_expert(a, &settings),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
