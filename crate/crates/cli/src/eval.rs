use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, ValueEnum};
use griffonforge_core::eval::{
    read_benchmark, run, run_toolkit_baseline, write_benchmark, EvalConfig, HttpModel, MockModel,
    OracleModel,
};
use griffonforge_core::synth::random_benchmark;
use griffonforge_core::{EvalCase, ModelClient};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Exit};
use crate::io::{open_input, open_output};
use crate::settings::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Oracle,
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Unified,
    Toolkit,
}

fn parse_enum<T: ValueEnum>(s: &str) -> Result<T, String> {
    T::from_str(s, true)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Benchmark JSONL, or `-` for stdin.
    pub bench: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Tool calls per case in toolkit mode.
    #[arg(long)]
    pub n_tools: Option<u32>,
    /// Simulated latency of each tool call, in milliseconds.
    #[arg(long)]
    pub tool_latency_ms: Option<u64>,
    /// Fraction of mock answers to corrupt.
    #[arg(long)]
    pub corruption: Option<f64>,
    /// Exit 5 when accuracy falls below this.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    /// Write the full JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub http_base_url: Option<String>,
    #[arg(long)]
    pub http_model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub http_api_key_env: Option<String>,
    #[arg(long)]
    pub http_timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenBenchArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// Benchmark JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn backend(
    kind: Backend,
    cases: &[EvalCase],
    seed: u64,
    args: &EvalArgs,
    s: &Settings,
) -> Result<Box<dyn ModelClient>, CliError> {
    Ok(match kind {
        Backend::Oracle => Box::new(OracleModel::from_cases(cases)),
        Backend::Mock => {
            let rate = s.pick(args.corruption, "corruption", 0.0)?;
            if !(0.0..=1.0).contains(&rate) {
                return Err(CliError::other(format!(
                    "--corruption must be in [0, 1], got {rate}"
                )));
            }
            Box::new(MockModel::new(cases, rate, seed))
        }
        Backend::Http => {
            let url = s.pick(
                args.http_base_url.clone(),
                "http_base_url",
                "http://127.0.0.1:8000/v1".to_string(),
            )?;
            let model = s.pick(args.http_model.clone(), "http_model", "model".to_string())?;
            let key_env = s.pick(
                args.http_api_key_env.clone(),
                "http_api_key_env",
                "EVAL_API_KEY".to_string(),
            )?;
            let timeout =
                Duration::from_millis(s.pick(args.http_timeout_ms, "http_timeout_ms", 120_000)?);
            let http = HttpModel::new(&url, &model, std::env::var(key_env).ok(), timeout)
                .map_err(|e| CliError::new(Exit::Transport, e.to_string()))?;
            Box::new(http)
        }
    })
}

pub fn run_eval(args: EvalArgs, settings: &Settings, seed: u64) -> Result<(), CliError> {
    let pick_enum = |flag: Option<Backend>| -> Result<Backend, CliError> {
        match flag {
            Some(b) => Ok(b),
            None => settings
                .raw("backend")
                .map(|v| {
                    parse_enum(v).map_err(|e| CliError::schema(format!("config: backend: {e}")))
                })
                .unwrap_or(Ok(Backend::Oracle)),
        }
    };
    let kind = pick_enum(args.backend)?;
    let mode = match args.mode {
        Some(m) => m,
        None => settings
            .raw("mode")
            .map(|v| parse_enum(v).map_err(|e| CliError::schema(format!("config: mode: {e}"))))
            .unwrap_or(Ok(Mode::Unified))?,
    };
    let cases = read_benchmark(open_input(&args.bench)?)?;
    let cfg = EvalConfig {
        parallelism: settings.pick(args.parallelism, "parallelism", 1)?,
        ..EvalConfig::default()
    };
    let model = backend(kind, &cases, seed, &args, settings)?;
    let report = match mode {
        Mode::Unified => run(&cases, model.as_ref(), &cfg),
        Mode::Toolkit => {
            let n_tools = settings.pick(args.n_tools, "n_tools", 4)?;
            let latency =
                Duration::from_millis(settings.pick(args.tool_latency_ms, "tool_latency_ms", 0)?);
            run_toolkit_baseline(&cases, model.as_ref(), latency, n_tools, &cfg)
        }
    };

    let mut out = open_output(None)?;
    out.write_all(report.render_table().as_bytes())?;
    out.flush()?;
    if let Some(path) = &args.report {
        let mut f = open_output(Some(path))?;
        serde_json::to_writer_pretty(&mut f, &report).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    if let Some(reason) = &report.aborted {
        return Err(CliError::new(
            Exit::Transport,
            format!("run aborted: {reason}"),
        ));
    }
    if let Some(min) = settings.pick_opt(args.min_accuracy, "min_accuracy")? {
        if report.accuracy < min {
            return Err(CliError::new(
                Exit::BelowAccuracy,
                format!(
                    "accuracy {:.4} is below the floor {min:.4}",
                    report.accuracy
                ),
            ));
        }
    }
    Ok(())
}

pub fn gen_bench(args: GenBenchArgs, settings: &Settings, seed: u64) -> Result<(), CliError> {
    let n = args.n.unwrap_or(100);
    let max_objects = settings.pick(args.max_objects, "max_objects", 10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = random_benchmark(&mut rng, n, max_objects);
    let mut out = open_output(args.out.as_ref())?;
    write_benchmark(&cases, &mut out)?;
    out.flush()?;
    tracing::info!(cases = n, seed, "benchmark written");
    Ok(())
}
