use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use griffonforge_core::expert::{annotate_batch, ExpertClient, ExpertConfig};
use griffonforge_core::filters::{read_raw_qa, RawQA};
use griffonforge_core::GrammarConfig;

use crate::error::{CliError, Exit};
use crate::io::{open_output, read_qa_text};
use crate::settings::Settings;

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// RawQA or filtered JSONL, or `-` for stdin.
    pub input: PathBuf,
    /// Expert endpoint settings (TOML).
    #[arg(long)]
    pub expert_config: Option<PathBuf>,
    /// Sample records (JSONL); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the cache directory from the expert config.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Records annotated concurrently.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Exit 3 when more than this fraction of records hit transport failures.
    #[arg(long)]
    pub max_transport_failure_rate: Option<f64>,
}

pub fn run(args: AnnotateArgs, settings: &Settings) -> Result<(), CliError> {
    let mut cfg = match settings.pick_opt(args.expert_config, "expert_config")? {
        Some(p) => ExpertConfig::load(p)?,
        None => ExpertConfig::default(),
    }
    .with_env(|k| std::env::var(k).ok())?;
    if let Some(dir) = settings.pick_opt(args.cache_dir, "cache_dir")? {
        cfg.cache_dir = dir;
    }
    let concurrency = settings.pick(args.concurrency, "concurrency", cfg.max_inflight)?;
    let threshold = settings.pick(
        args.max_transport_failure_rate,
        "max_transport_failure_rate",
        0.1,
    )?;

    let text = read_qa_text(&args.input)?;
    let records: Vec<RawQA> = read_raw_qa(text.as_bytes()).collect::<Result<_, _>>()?;

    let rt = tokio::runtime::Runtime::new()?;
    let client = ExpertClient::new(cfg, GrammarConfig::default())?;
    let outcome = rt.block_on(annotate_batch(&client, &records, concurrency));

    let mut out = open_output(args.out.as_ref())?;
    for s in &outcome.samples {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    tracing::info!(
        records = records.len(),
        network_calls = client.network_calls(),
        transport_failures = outcome.transport_failures,
        routed_to_review = outcome.parse_failures,
        "annotate done"
    );
    let rate = if records.is_empty() {
        0.0
    } else {
        outcome.transport_failures as f64 / records.len() as f64
    };
    if rate > threshold {
        return Err(CliError::new(
            Exit::Transport,
            format!(
                "{} of {} records failed to reach the expert endpoint ({:.1}% > {:.1}%)",
                outcome.transport_failures,
                records.len(),
                rate * 100.0,
                threshold * 100.0
            ),
        ));
    }
    Ok(())
}
