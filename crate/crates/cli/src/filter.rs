use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use griffonforge_core::filters::{
    dedup_against, filter_dataset, read_raw_qa, read_reference_ids, FilterOptions, FilteredRecord,
    KeywordLexicon, RawQA,
};

use crate::error::CliError;
use crate::io::{open_input, open_output, read_qa_text};
use crate::settings::Settings;

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// RawQA JSONL, or `-` for stdin.
    pub input: PathBuf,
    /// Keyword lexicon; the bundled one when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Kept records (JSONL); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write filter statistics as JSON here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Questions with fewer tokens are too simple.
    #[arg(long)]
    pub min_tokens: Option<usize>,
    /// Drop records whose (source_dataset, id) appears in this JSONL file.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

pub fn run(args: FilterArgs, settings: &Settings) -> Result<(), CliError> {
    let lexicon = match settings.pick_opt(args.lexicon, "lexicon")? {
        Some(p) => KeywordLexicon::load(&p)?,
        None => KeywordLexicon::default_lexicon(),
    };
    for w in &lexicon.warnings {
        tracing::warn!("lexicon: {w}");
    }
    let opts = FilterOptions {
        min_tokens: settings.pick(
            args.min_tokens,
            "min_tokens",
            FilterOptions::default().min_tokens,
        )?,
    };
    let text = read_qa_text(&args.input)?;
    let records: Vec<RawQA> = read_raw_qa(text.as_bytes()).collect::<Result<_, _>>()?;
    let records = match &args.reference {
        Some(path) => {
            let reference = read_reference_ids(open_input(path)?)?;
            let (kept, removed) = dedup_against(records, &reference);
            tracing::info!(removed, "dropped records present in the reference set");
            kept
        }
        None => records,
    };

    let mut out = open_output(args.out.as_ref())?;
    let stats = filter_dataset(
        records.into_iter().map(Ok),
        &lexicon,
        opts,
        |qa, decision| {
            if !decision.keep {
                return Ok(());
            }
            let rec = FilteredRecord {
                qa: qa.clone(),
                decision: decision.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")
        },
    )?;
    out.flush()?;
    tracing::info!(
        total = stats.total,
        kept = stats.kept,
        rejected = stats.rejected,
        "filter done"
    );
    if let Some(path) = &args.stats {
        let mut f = open_output(Some(path))?;
        serde_json::to_writer_pretty(&mut f, &stats).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    Ok(())
}
