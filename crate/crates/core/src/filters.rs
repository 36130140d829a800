//! Raw VQA selection: yes/no detection, reasoning-keyword matching,
//! duplicate and too-simple elimination, and reference-set dedup.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{from_json_str, SchemaViolation};
use crate::trace::ImageRef;

/// Shipped stand-in lexicon. Not the lists used for any published data split.
pub const DEFAULT_LEXICON: &str = include_str!("../lexicon/default.txt");

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("line {line}: schema violation at {path}: {reason}")]
    SchemaViolation {
        line: usize,
        path: String,
        reason: String,
    },
    #[error("record {record}: {source}")]
    Io {
        record: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Read(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordKind {
    Relation,
    Attribute,
}

/// Relation and attribute keyword sets. Multiword entries are stored as
/// token sequences and matched contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordLexicon {
    pub relations: BTreeSet<String>,
    pub attributes: BTreeSet<String>,
    pub source_tag: String,
    /// Words present in both sections. Matched as relations.
    pub warnings: Vec<String>,
    index: HashMap<String, Vec<(Vec<String>, KeywordKind)>>,
}

/// Lowercased maximal alphanumeric runs. Apostrophes inside words are kept.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let inner_apostrophe =
            c == '\'' && !cur.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_apostrophe {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl KeywordLexicon {
    pub fn new(
        relations: impl IntoIterator<Item = String>,
        attributes: impl IntoIterator<Item = String>,
        source_tag: impl Into<String>,
    ) -> Result<Self, FilterError> {
        let norm = |w: String| tokenize(&w).join(" ");
        let relations: BTreeSet<String> = relations
            .into_iter()
            .map(norm)
            .filter(|w| !w.is_empty())
            .collect();
        let attributes: BTreeSet<String> = attributes
            .into_iter()
            .map(norm)
            .filter(|w| !w.is_empty())
            .collect();
        if relations.is_empty() && attributes.is_empty() {
            return Err(FilterError::Lexicon {
                line: 0,
                reason: "lexicon is empty".into(),
            });
        }
        let warnings: Vec<String> = relations.intersection(&attributes).cloned().collect();
        let mut index: HashMap<String, Vec<(Vec<String>, KeywordKind)>> = HashMap::new();
        for (words, kind) in [
            (&attributes, KeywordKind::Attribute),
            (&relations, KeywordKind::Relation),
        ] {
            for w in words {
                let toks: Vec<String> = w.split(' ').map(str::to_string).collect();
                let bucket = index.entry(toks[0].clone()).or_default();
                bucket.retain(|(t, _)| *t != toks);
                bucket.push((toks, kind));
            }
        }
        for bucket in index.values_mut() {
            bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(Self {
            relations,
            attributes,
            source_tag: source_tag.into(),
            warnings,
            index,
        })
    }

    /// Parse the sectioned format: `[relations]` / `[attributes]` headers,
    /// one keyword per line, `#` comments.
    pub fn parse(text: &str, source_tag: impl Into<String>) -> Result<Self, FilterError> {
        let mut relations = Vec::new();
        let mut attributes = Vec::new();
        let mut section: Option<KeywordKind> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim().to_ascii_lowercase().as_str() {
                    "relations" => Some(KeywordKind::Relation),
                    "attributes" => Some(KeywordKind::Attribute),
                    other => {
                        return Err(FilterError::Lexicon {
                            line: i + 1,
                            reason: format!("unknown section [{other}]"),
                        })
                    }
                };
                continue;
            }
            match section {
                Some(KeywordKind::Relation) => relations.push(line.to_string()),
                Some(KeywordKind::Attribute) => attributes.push(line.to_string()),
                None => {
                    return Err(FilterError::Lexicon {
                        line: i + 1,
                        reason: "keyword before any section header".into(),
                    })
                }
            }
        }
        Self::new(relations, attributes, source_tag)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FilterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON, "default").expect("bundled lexicon parses")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawQA {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    pub answer: String,
    pub source_dataset: String,
}

/// Answer is exactly "yes" or "no" after lowercasing and stripping trailing punctuation.
pub fn is_yes_no(qa: &RawQA) -> bool {
    let a = qa.answer.trim().to_lowercase();
    let a = a
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end();
    a == "yes" || a == "no"
}

/// Whole-word keyword matches in question order. At each position the
/// longest entry wins and matching resumes after it.
pub fn match_keywords(question: &str, lex: &KeywordLexicon) -> Vec<(String, KeywordKind)> {
    let toks = tokenize(question);
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let hit = lex.index.get(&toks[i]).and_then(|bucket| {
            bucket.iter().find(|(entry, _)| {
                toks.len() - i >= entry.len() && toks[i..i + entry.len()] == entry[..]
            })
        });
        match hit {
            Some((entry, kind)) => {
                out.push((entry.join(" "), *kind));
                i += entry.len();
            }
            None => i += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    YesNo,
    RelationKeyword,
    AttributeKeyword,
    NoCriterion,
    Duplicate,
    TooSimple,
}

impl FilterReason {
    pub const ALL: [FilterReason; 6] = [
        FilterReason::YesNo,
        FilterReason::RelationKeyword,
        FilterReason::AttributeKeyword,
        FilterReason::NoCriterion,
        FilterReason::Duplicate,
        FilterReason::TooSimple,
    ];

    pub fn is_keep_reason(self) -> bool {
        matches!(
            self,
            FilterReason::YesNo | FilterReason::RelationKeyword | FilterReason::AttributeKeyword
        )
    }
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    /// Keep reasons when kept, every applicable reject reason otherwise.
    pub reasons: Vec<FilterReason>,
    pub matched_keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOptions {
    pub min_tokens: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { min_tokens: 4 }
    }
}

/// Per-reason counts. A record contributes to every reason it carries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub rejected: usize,
    pub per_reason: BTreeMap<FilterReason, usize>,
}

impl FilterStats {
    fn empty() -> Self {
        Self {
            per_reason: FilterReason::ALL.iter().map(|r| (*r, 0)).collect(),
            ..Self::default()
        }
    }

    pub fn count(&self, reason: FilterReason) -> usize {
        self.per_reason.get(&reason).copied().unwrap_or(0)
    }
}

/// Streaming single-pass filter holding the duplicate seen-set.
#[derive(Debug)]
pub struct DatasetFilter<'a> {
    lex: &'a KeywordLexicon,
    opts: FilterOptions,
    seen: HashSet<(String, String)>,
    stats: FilterStats,
}

impl<'a> DatasetFilter<'a> {
    pub fn new(lex: &'a KeywordLexicon, opts: FilterOptions) -> Self {
        Self {
            lex,
            opts,
            seen: HashSet::new(),
            stats: FilterStats::empty(),
        }
    }

    pub fn push(&mut self, qa: &RawQA) -> FilterDecision {
        let tokens = tokenize(&qa.question);
        let matches = match_keywords(&qa.question, self.lex);

        let mut keep_reasons = Vec::new();
        if is_yes_no(qa) {
            keep_reasons.push(FilterReason::YesNo);
        }
        if matches.iter().any(|(_, k)| *k == KeywordKind::Relation) {
            keep_reasons.push(FilterReason::RelationKeyword);
        }
        if matches.iter().any(|(_, k)| *k == KeywordKind::Attribute) {
            keep_reasons.push(FilterReason::AttributeKeyword);
        }

        let mut reject = Vec::new();
        if keep_reasons.is_empty() {
            reject.push(FilterReason::NoCriterion);
        }
        if !self.seen.insert((qa.image.id.clone(), tokens.join(" "))) {
            reject.push(FilterReason::Duplicate);
        }
        if tokens.len() < self.opts.min_tokens {
            reject.push(FilterReason::TooSimple);
        }

        let keep = reject.is_empty();
        let reasons = if keep { keep_reasons } else { reject };
        self.stats.total += 1;
        if keep {
            self.stats.kept += 1;
        } else {
            self.stats.rejected += 1;
        }
        for r in &reasons {
            *self.stats.per_reason.entry(*r).or_default() += 1;
        }
        FilterDecision {
            keep,
            reasons,
            matched_keywords: matches.into_iter().map(|(w, _)| w).collect(),
        }
    }

    pub fn stats(&self) -> &FilterStats {
        &self.stats
    }

    pub fn into_stats(self) -> FilterStats {
        self.stats
    }
}

/// Run every record through a fresh [`DatasetFilter`], handing each
/// (record, decision) pair to `sink` in input order.
pub fn filter_dataset<I, F>(
    qas: I,
    lex: &KeywordLexicon,
    opts: FilterOptions,
    mut sink: F,
) -> Result<FilterStats, FilterError>
where
    I: IntoIterator<Item = Result<RawQA, FilterError>>,
    F: FnMut(&RawQA, &FilterDecision) -> std::io::Result<()>,
{
    let mut filter = DatasetFilter::new(lex, opts);
    for qa in qas {
        let qa = qa?;
        let d = filter.push(&qa);
        sink(&qa, &d).map_err(|source| FilterError::Io {
            record: qa.id.clone(),
            source,
        })?;
    }
    Ok(filter.into_stats())
}

/// Kept-record output line: the RawQA fields plus its decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredRecord {
    #[serde(flatten)]
    pub qa: RawQA,
    pub decision: FilterDecision,
}

/// Lazily read RawQA JSONL. Blank lines are skipped.
pub fn read_raw_qa(reader: impl BufRead) -> impl Iterator<Item = Result<RawQA, FilterError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(FilterError::Read(e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        let schema = |path: &str, reason: &str| FilterError::SchemaViolation {
            line: i + 1,
            path: path.into(),
            reason: reason.into(),
        };
        Some(match from_json_str::<RawQA>(&line) {
            Err(SchemaViolation { path, reason }) => Err(schema(&path, &reason)),
            Ok(qa) if qa.question.trim().is_empty() => Err(schema("/question", "empty")),
            Ok(qa) if qa.answer.trim().is_empty() => Err(schema("/answer", "empty")),
            Ok(qa) => Ok(qa),
        })
    })
}

#[derive(Debug, Deserialize)]
struct ReferenceId {
    source_dataset: String,
    id: String,
}

/// Reference ids from JSONL lines carrying at least `source_dataset` and `id`.
pub fn read_reference_ids(reader: impl BufRead) -> Result<HashSet<(String, String)>, FilterError> {
    let mut out = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ReferenceId = from_json_str(&line).map_err(|v| FilterError::SchemaViolation {
            line: i + 1,
            path: v.path,
            reason: v.reason,
        })?;
        out.insert((r.source_dataset, r.id));
    }
    Ok(out)
}

/// Drop records whose (source_dataset, id) is in `reference`; returns the
/// survivors and the removal count.
pub fn dedup_against(
    qas: impl IntoIterator<Item = RawQA>,
    reference: &HashSet<(String, String)>,
) -> (Vec<RawQA>, usize) {
    let mut removed = 0;
    let kept = qas
        .into_iter()
        .filter(|qa| {
            let hit = reference.contains(&(qa.source_dataset.clone(), qa.id.clone()));
            removed += usize::from(hit);
            !hit
        })
        .collect();
    (kept, removed)
}
