//! Client for the external expert model: templated question analysis and
//! capability planning, easy-task pre-annotation, bounded concurrency,
//! retries and a content-addressed response cache.

pub mod fake;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::chat::{image_part, text_part, ChatMessage, ChatRequest, ChatResponse};
use crate::filters::RawQA;
use crate::grammar::{extract_boxes, sanitize_label, GrammarConfig};
use crate::service::SampleRecord;
use crate::trace::{clip_box, Capability, ImageRef, VisualCue};

/// Participates in every cache key; bump when a template file changes.
pub const TEMPLATE_VERSION: &str = "v1";

const I1_TEMPLATE: &str = include_str!("../../templates/i1_v1.txt");
const I2_TEMPLATE: &str = include_str!("../../templates/i2_v1.txt");
const CAPTION_TEMPLATE: &str = include_str!("../../templates/caption_v1.txt");
const GROUNDED_CAPTION_TEMPLATE: &str = include_str!("../../templates/grounded_caption_v1.txt");
const TEXT_RECOGNITION_TEMPLATE: &str = include_str!("../../templates/text_recognition_v1.txt");
const GLOBAL_TEMPLATE: &str = include_str!("../../templates/global_understanding_v1.txt");

/// Capabilities offered to the expert in the planning prompt by default.
pub const DEFAULT_TASKS: [Capability; 6] = [
    Capability::Caption,
    Capability::GroundedCaption,
    Capability::VisualGrounding,
    Capability::TextRecognition,
    Capability::Rec,
    Capability::Reg,
];

/// Capabilities the expert annotates directly; everything else goes to humans.
pub const EXPERT_CAPABILITIES: [Capability; 4] = [
    Capability::Caption,
    Capability::GroundedCaption,
    Capability::TextRecognition,
    Capability::GlobalUnderstanding,
];

fn template(raw: &'static str) -> &'static str {
    raw.strip_suffix('\n').unwrap_or(raw)
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("task list is empty")]
    EmptyTaskList,
    #[error("invalid expert config: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unparseable {stage} response")]
    ParseFailure { stage: &'static str, raw: String },
    #[error("image {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ExpertError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ExpertError::Transport { .. })
    }
}

pub fn build_prompt_i1(question: &str) -> Result<String, ExpertError> {
    if question.trim().is_empty() {
        return Err(ExpertError::EmptyQuestion);
    }
    Ok(template(I1_TEMPLATE).replace("{question}", question))
}

/// `[TASKs]` becomes the bracketed, comma-joined capability names.
pub fn build_prompt_i2(question: &str, tasks: &[Capability]) -> Result<String, ExpertError> {
    if question.trim().is_empty() {
        return Err(ExpertError::EmptyQuestion);
    }
    if tasks.is_empty() {
        return Err(ExpertError::EmptyTaskList);
    }
    let names: Vec<&str> = tasks.iter().map(|c| c.name()).collect();
    Ok(template(I2_TEMPLATE)
        .replace("[TASKs]", &format!("[{}]", names.join(", ")))
        .replace("{question}", question))
}

fn easy_prompt(capability: Capability, target: Option<&str>, question: &str) -> String {
    let target = target.unwrap_or("the image");
    let t = match capability {
        Capability::GroundedCaption => GROUNDED_CAPTION_TEMPLATE,
        Capability::TextRecognition => TEXT_RECOGNITION_TEMPLATE,
        Capability::GlobalUnderstanding => GLOBAL_TEMPLATE,
        _ => CAPTION_TEMPLATE,
    };
    template(t)
        .replace("{target}", target)
        .replace("{question}", question)
}

// ---------------------------------------------------------------------------
// config

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model_name: String,
    pub max_inflight: usize,
    pub retry_limit: u32,
    /// First backoff delay; doubles on each retry.
    pub retry_base: Duration,
    pub timeout: Duration,
    pub cache_dir: PathBuf,
    pub tasks: Vec<Capability>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8089/v1".into(),
            api_key_env: "EXPERT_API_KEY".into(),
            model_name: "expert".into(),
            max_inflight: 4,
            retry_limit: 3,
            retry_base: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
            cache_dir: PathBuf::from(".cache/expert"),
            tasks: DEFAULT_TASKS.to_vec(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertConfigFile {
    base_url: Option<String>,
    api_key_env: Option<String>,
    model_name: Option<String>,
    max_inflight: Option<usize>,
    retry_limit: Option<u32>,
    retry_base_ms: Option<u64>,
    timeout_ms: Option<u64>,
    cache_dir: Option<PathBuf>,
    tasks: Option<Vec<String>>,
}

impl ExpertConfig {
    /// Parse a flat `key = value` file; missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, ExpertError> {
        let f: ExpertConfigFile =
            toml::from_str(text).map_err(|e| ExpertError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        if let Some(v) = f.base_url {
            cfg.base_url = v;
        }
        if let Some(v) = f.api_key_env {
            cfg.api_key_env = v;
        }
        if let Some(v) = f.model_name {
            cfg.model_name = v;
        }
        if let Some(v) = f.max_inflight {
            cfg.max_inflight = v;
        }
        if let Some(v) = f.retry_limit {
            cfg.retry_limit = v;
        }
        if let Some(v) = f.retry_base_ms {
            cfg.retry_base = Duration::from_millis(v);
        }
        if let Some(v) = f.timeout_ms {
            cfg.timeout = Duration::from_millis(v);
        }
        if let Some(v) = f.cache_dir {
            cfg.cache_dir = v;
        }
        if let Some(v) = f.tasks {
            cfg.tasks = parse_tasks(&v.join(","))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExpertError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ExpertError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Apply `GRIFFONFORGE_EXPERT_*` overrides from `lookup`.
    pub fn with_env(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ExpertError> {
        let get = |k: &str| lookup(&format!("GRIFFONFORGE_EXPERT_{k}"));
        let num = |k: &str, v: String| {
            v.parse::<u64>().map_err(|_| {
                ExpertError::Config(format!("GRIFFONFORGE_EXPERT_{k}: not a number: {v}"))
            })
        };
        if let Some(v) = get("BASE_URL") {
            self.base_url = v;
        }
        if let Some(v) = get("API_KEY_ENV") {
            self.api_key_env = v;
        }
        if let Some(v) = get("MODEL_NAME") {
            self.model_name = v;
        }
        if let Some(v) = get("MAX_INFLIGHT") {
            self.max_inflight = num("MAX_INFLIGHT", v)? as usize;
        }
        if let Some(v) = get("RETRY_LIMIT") {
            self.retry_limit = num("RETRY_LIMIT", v)?.min(u64::from(u32::MAX)) as u32;
        }
        if let Some(v) = get("RETRY_BASE_MS") {
            self.retry_base = Duration::from_millis(num("RETRY_BASE_MS", v)?);
        }
        if let Some(v) = get("TIMEOUT_MS") {
            self.timeout = Duration::from_millis(num("TIMEOUT_MS", v)?);
        }
        if let Some(v) = get("CACHE_DIR") {
            self.cache_dir = PathBuf::from(v);
        }
        if let Some(v) = get("TASKS") {
            self.tasks = parse_tasks(&v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.max_inflight < 1 {
            return Err(ExpertError::Config(
                "max_inflight must be at least 1".into(),
            ));
        }
        if self.retry_limit > 10 {
            return Err(ExpertError::Config("retry_limit must be at most 10".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ExpertError::Config("base_url is empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(ExpertError::EmptyTaskList);
        }
        Ok(())
    }
}

fn parse_tasks(list: &str) -> Result<Vec<Capability>, ExpertError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            Capability::lookup(s)
                .ok_or_else(|| ExpertError::Config(format!("unknown capability `{s}`")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// cache

/// sha256 over length-prefixed parts, hex encoded.
pub fn cache_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Content-addressed JSON files under `<dir>/<kind>/<key>.json`. Writes go
/// through a temp file and a rename, so readers never see partial entries.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_SEQ: AtomicUsize = AtomicUsize::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, kind: &str, key: &str) -> PathBuf {
        self.dir.join(kind).join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get<T: DeserializeOwned>(&self, kind: &str, key: &str) -> Option<T> {
        let bytes = std::fs::read(self.path(kind, key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.path(kind, key);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(value).expect("cache entries serialize"))?;
        f.sync_all()?;
        std::fs::rename(&tmp, &path)
    }
}

// ---------------------------------------------------------------------------
// analysis

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub capability: Capability,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAnalysis {
    pub key_entities: Vec<String>,
    pub plan: Vec<PlanEntry>,
    pub raw_i1_response: String,
    pub raw_i2_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Served from cache. Not serialized, so outputs stay byte-identical
    /// between cold and warm runs.
    #[serde(skip)]
    pub cached: bool,
}

impl ExpertAnalysis {
    /// Interpret the two raw replies. Pure.
    pub fn from_responses(
        raw_i1: &str,
        raw_i2: &str,
        grammar: &GrammarConfig,
    ) -> Result<Self, ExpertError> {
        let mut key_entities = parse_entities(raw_i1, grammar);
        let (plan, warnings) = parse_plan(raw_i2, &key_entities, grammar).ok_or_else(|| {
            ExpertError::ParseFailure {
                stage: "plan",
                raw: raw_i2.to_string(),
            }
        })?;
        if key_entities.is_empty() {
            let mut seen = BTreeSet::new();
            key_entities = plan
                .iter()
                .flat_map(|e| e.targets.iter().cloned())
                .filter(|t| seen.insert(t.clone()))
                .collect();
        }
        let global_only = plan.len() == 1
            && plan[0].capability == Capability::GlobalUnderstanding
            && plan[0].targets.is_empty();
        if key_entities.is_empty() && !global_only {
            return Err(ExpertError::ParseFailure {
                stage: "entities",
                raw: raw_i1.to_string(),
            });
        }
        Ok(Self {
            key_entities,
            plan,
            raw_i1_response: raw_i1.to_string(),
            raw_i2_response: raw_i2.to_string(),
            warnings,
            cached: false,
        })
    }
}

fn strip_bullet(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix(['.', ')']) {
            return rest.trim();
        }
    }
    t
}

fn clean_item(s: &str, grammar: &GrammarConfig) -> Option<String> {
    let s = s.trim().trim_matches(['"', '\'', '`', '*']).trim();
    let s = s.strip_prefix("and ").unwrap_or(s);
    let s = s.trim_end_matches(['.', '!', '?']);
    sanitize_label(s, grammar)
}

fn push_unique(out: &mut Vec<String>, item: String) {
    if !out.contains(&item) {
        out.push(item);
    }
}

/// Entities one per line, or comma separated on a single line. Bullets,
/// numbering and header lines ending in ':' are dropped.
pub fn parse_entities(raw: &str, grammar: &GrammarConfig) -> Vec<String> {
    let lines: Vec<&str> = raw
        .lines()
        .map(strip_bullet)
        .filter(|l| !l.is_empty() && !l.ends_with(':'))
        .collect();
    let items: Vec<&str> = match lines.as_slice() {
        [single] => single.split(',').collect(),
        many => many.to_vec(),
    };
    let mut out = Vec::new();
    for item in items {
        if let Some(e) = clean_item(item, grammar) {
            if !e.eq_ignore_ascii_case("none") {
                push_unique(&mut out, e);
            }
        }
    }
    out
}

fn split_targets(s: &str, grammar: &GrammarConfig) -> Vec<String> {
    let mut out = Vec::new();
    for part in s.split([',', ';']) {
        if let Some(t) = clean_item(part, grammar) {
            push_unique(&mut out, t);
        }
    }
    out
}

fn default_targets(capability: Capability, entities: &[String]) -> Vec<String> {
    if capability.allows_no_targets() {
        Vec::new()
    } else {
        entities.to_vec()
    }
}

/// Every capability name mentioned in free text, in order of appearance,
/// preferring the longest name at each position.
fn scan_capabilities(raw: &str) -> Vec<Capability> {
    let lower = raw.to_lowercase();
    let mut hits: Vec<(usize, usize, Capability)> = Vec::new();
    for c in Capability::ALL {
        let name = c.name().to_lowercase();
        let mut from = 0;
        while let Some(pos) = lower[from..].find(&name) {
            let start = from + pos;
            let end = start + name.len();
            let word_start = lower[..start]
                .chars()
                .next_back()
                .is_none_or(|ch| !ch.is_alphanumeric());
            let word_end = lower[end..]
                .chars()
                .next()
                .is_none_or(|ch| !ch.is_alphanumeric());
            if word_start && word_end {
                hits.push((start, end, c));
            }
            from = end;
        }
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out = Vec::new();
    let mut covered = 0;
    for (start, end, c) in hits {
        if start >= covered {
            if !out.contains(&c) {
                out.push(c);
            }
            covered = end;
        }
    }
    out
}

/// Plan lines look like `Capability: target, target` or a bare capability
/// name. Unknown names with targets map to Global Understanding with a
/// warning. Falls back to scanning for capability names anywhere in the
/// reply. `None` when no plan can be recovered.
pub fn parse_plan(
    raw: &str,
    entities: &[String],
    grammar: &GrammarConfig,
) -> Option<(Vec<PlanEntry>, Vec<String>)> {
    let mut plan: Vec<PlanEntry> = Vec::new();
    let mut warnings = Vec::new();
    let push = |plan: &mut Vec<PlanEntry>, warnings: &mut Vec<String>, entry: PlanEntry| {
        if entry.targets.is_empty() && !entry.capability.allows_no_targets() {
            warnings.push(format!("{} has no targets; dropped", entry.capability));
        } else if !plan.contains(&entry) {
            plan.push(entry);
        }
    };
    for line in raw.lines().map(strip_bullet).filter(|l| !l.is_empty()) {
        let (name, rest) = match line.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (line, None),
        };
        let name = name
            .trim()
            .trim_matches(['[', ']', '"', '\'', '*', '`', '.'])
            .trim();
        let targets = |cap| match rest.map(|r| split_targets(r, grammar)) {
            Some(t) if !t.is_empty() => t,
            _ => default_targets(cap, entities),
        };
        match Capability::lookup(name) {
            Some(cap) => {
                let entry = PlanEntry {
                    capability: cap,
                    targets: targets(cap),
                };
                push(&mut plan, &mut warnings, entry);
            }
            None if rest.is_some() && name.split_whitespace().count() <= 4 => {
                let (cap, _) = Capability::from_expert(name);
                warnings.push(format!("unknown capability `{name}` mapped to {cap}"));
                let entry = PlanEntry {
                    capability: cap,
                    targets: rest.map(|r| split_targets(r, grammar)).unwrap_or_default(),
                };
                push(&mut plan, &mut warnings, entry);
            }
            None => {}
        }
    }
    if plan.is_empty() {
        for cap in scan_capabilities(raw) {
            let entry = PlanEntry {
                capability: cap,
                targets: default_targets(cap, entities),
            };
            push(&mut plan, &mut warnings, entry);
        }
    }
    (!plan.is_empty()).then_some((plan, warnings))
}

// ---------------------------------------------------------------------------
// easy tasks

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EasyAnnotation {
    pub cues: Vec<VisualCue>,
    /// Plan entries left for human annotation.
    pub pending: Vec<PlanEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
struct EasyRequest {
    capability: Capability,
    target: Option<String>,
}

fn easy_requests(analysis: &ExpertAnalysis) -> (Vec<EasyRequest>, Vec<PlanEntry>) {
    let mut requests = Vec::new();
    let mut pending = Vec::new();
    for entry in &analysis.plan {
        let cap = entry.capability;
        if !EXPERT_CAPABILITIES.contains(&cap) {
            pending.push(entry.clone());
            continue;
        }
        let one = |target: Option<String>| EasyRequest {
            capability: cap,
            target,
        };
        match cap {
            Capability::GlobalUnderstanding => requests.push(one(None)),
            Capability::GroundedCaption if !entry.targets.is_empty() => {
                requests.push(one(Some(entry.targets.join(" and "))))
            }
            _ if entry.targets.is_empty() => requests.push(one(None)),
            _ => requests.extend(entry.targets.iter().map(|t| one(Some(t.clone())))),
        }
    }
    (requests, pending)
}

fn easy_cues(
    req: &EasyRequest,
    raw: &str,
    image: &ImageRef,
    grammar: &GrammarConfig,
    warnings: &mut Vec<String>,
) -> Vec<VisualCue> {
    let text = raw.trim();
    let label = |fallback: &str| {
        req.target
            .as_deref()
            .and_then(|t| sanitize_label(t, grammar))
            .unwrap_or_else(|| fallback.to_string())
    };
    match req.capability {
        Capability::GroundedCaption => {
            let extracted = extract_boxes(text, grammar);
            for w in &extracted.warnings {
                warnings.push(format!(
                    "grounded caption: skipped `{}` ({})",
                    w.slice, w.reason
                ));
            }
            let mut cues: Vec<VisualCue> = Vec::new();
            for (raw_label, b) in extracted.boxes {
                let Some(l) = sanitize_label(&raw_label, grammar) else {
                    continue;
                };
                let Ok(b) = clip_box(&b, image) else {
                    warnings.push(format!(
                        "grounded caption: box {b} for `{l}` falls outside the image"
                    ));
                    continue;
                };
                match cues.iter_mut().find(|c| c.label == l) {
                    Some(VisualCue {
                        payload: crate::trace::CuePayload::Boxes { boxes },
                        ..
                    }) => boxes.push(b),
                    _ => cues.push(VisualCue::boxes(l, vec![b])),
                }
            }
            if cues.is_empty() {
                cues.push(VisualCue::caption(label("image"), text));
            }
            cues
        }
        Capability::TextRecognition => vec![VisualCue::text(label("text"), text)],
        Capability::GlobalUnderstanding => vec![VisualCue::caption("global context", text)],
        _ => vec![VisualCue::caption(label("image"), text)],
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnalysisEntry {
    raw_i1: String,
    raw_i2: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EasyEntry {
    raw: String,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(ExpertError),
}

/// Async client. Safe to share across tasks; the in-flight window is
/// enforced per client.
#[derive(Debug)]
pub struct ExpertClient {
    cfg: ExpertConfig,
    grammar: GrammarConfig,
    http: reqwest::Client,
    api_key: Option<String>,
    permits: Semaphore,
    cache: ResponseCache,
    network_calls: AtomicUsize,
}

impl ExpertClient {
    pub fn new(cfg: ExpertConfig, grammar: GrammarConfig) -> Result<Self, ExpertError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ExpertError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Ok(Self {
            permits: Semaphore::new(cfg.max_inflight),
            cache: ResponseCache::new(cfg.cache_dir.clone()),
            http,
            api_key,
            grammar,
            cfg,
            network_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.cfg
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    async fn chat(&self, messages: Vec<ChatMessage>) -> Result<String, ExpertError> {
        let req = ChatRequest {
            model: self.cfg.model_name.clone(),
            messages,
            temperature: 0.0,
        };
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let mut attempt: u32 = 0;
        loop {
            let outcome = {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .expect("semaphore is never closed");
                self.network_calls.fetch_add(1, Ordering::SeqCst);
                let mut rb = self.http.post(&url).json(&req);
                if let Some(k) = &self.api_key {
                    rb = rb.bearer_auth(k);
                }
                match rb.send().await {
                    Err(e) => Attempt::Retry(e.to_string()),
                    Ok(resp) => {
                        let status = resp.status();
                        match resp.text().await {
                            Err(e) => Attempt::Retry(e.to_string()),
                            Ok(_) if status.is_server_error() || status.as_u16() == 429 => {
                                Attempt::Retry(format!("HTTP {status}"))
                            }
                            Ok(body) if !status.is_success() => {
                                Attempt::Fatal(ExpertError::Transport {
                                    attempts: attempt + 1,
                                    message: format!("HTTP {status}: {body}"),
                                })
                            }
                            Ok(body) => match serde_json::from_str::<ChatResponse>(&body)
                                .ok()
                                .and_then(ChatResponse::into_text)
                            {
                                Some(text) => Attempt::Done(text),
                                None => Attempt::Fatal(ExpertError::ParseFailure {
                                    stage: "response",
                                    raw: body,
                                }),
                            },
                        }
                    }
                }
            };
            match outcome {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(message) => {
                    if attempt >= self.cfg.retry_limit {
                        return Err(ExpertError::Transport {
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    tracing::debug!(attempt, %message, "retrying expert request");
                    tokio::time::sleep(self.cfg.retry_base.saturating_mul(1 << attempt)).await;
                    attempt += 1;
                }
            }
        }
    }

    fn image_message(&self, image: &ImageRef, prompt: String) -> Result<ChatMessage, ExpertError> {
        let img = image_part(image).map_err(|source| ExpertError::Image {
            id: image.id.clone(),
            source,
        })?;
        Ok(ChatMessage::user(vec![img, text_part(prompt)]))
    }

    fn task_names(&self) -> String {
        self.cfg
            .tasks
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Run I.1 then I.2 (with I.1's exchange as context) and interpret the
    /// replies. Raw replies are cached, so a warm run makes no requests and
    /// reproduces parse failures exactly.
    pub async fn analyze(
        &self,
        image: &ImageRef,
        question: &str,
    ) -> Result<ExpertAnalysis, ExpertError> {
        let p1 = build_prompt_i1(question)?;
        let p2 = build_prompt_i2(question, &self.cfg.tasks)?;
        let tasks = self.task_names();
        let key = cache_key(&[
            &self.cfg.model_name,
            question,
            &image.id,
            TEMPLATE_VERSION,
            &tasks,
        ]);
        let (entry, cached) = match self.cache.get::<AnalysisEntry>("analysis", &key) {
            Some(e) => (e, true),
            None => {
                let first = self.image_message(image, p1)?;
                let raw_i1 = self.chat(vec![first.clone()]).await?;
                let raw_i2 = self
                    .chat(vec![
                        first,
                        ChatMessage::assistant(raw_i1.clone()),
                        ChatMessage::user(vec![text_part(p2)]),
                    ])
                    .await?;
                let e = AnalysisEntry { raw_i1, raw_i2 };
                self.cache.put("analysis", &key, &e)?;
                (e, false)
            }
        };
        let mut analysis =
            ExpertAnalysis::from_responses(&entry.raw_i1, &entry.raw_i2, &self.grammar)?;
        analysis.cached = cached;
        Ok(analysis)
    }

    async fn easy_call(
        &self,
        image: &ImageRef,
        question: &str,
        req: &EasyRequest,
    ) -> Result<String, ExpertError> {
        let target = req.target.as_deref().unwrap_or("");
        let key = cache_key(&[
            &self.cfg.model_name,
            "easy",
            TEMPLATE_VERSION,
            req.capability.name(),
            target,
            question,
            &image.id,
        ]);
        if let Some(e) = self.cache.get::<EasyEntry>("easy", &key) {
            return Ok(e.raw);
        }
        let prompt = easy_prompt(req.capability, req.target.as_deref(), question);
        let raw = self.chat(vec![self.image_message(image, prompt)?]).await?;
        self.cache
            .put("easy", &key, &EasyEntry { raw: raw.clone() })?;
        Ok(raw)
    }

    /// Query the expert for the plan entries it handles and turn replies
    /// into cues. Other entries are returned untouched as pending.
    pub async fn annotate_easy_tasks(
        &self,
        image: &ImageRef,
        question: &str,
        analysis: &ExpertAnalysis,
    ) -> Result<EasyAnnotation, ExpertError> {
        let (requests, pending) = easy_requests(analysis);
        let replies = futures::future::try_join_all(
            requests.iter().map(|r| self.easy_call(image, question, r)),
        )
        .await?;
        let mut warnings = Vec::new();
        let mut cues: Vec<VisualCue> = Vec::new();
        for (req, raw) in requests.iter().zip(&replies) {
            for cue in easy_cues(req, raw, image, &self.grammar, &mut warnings) {
                if cues.iter().any(|c| c.label == cue.label) {
                    warnings.push(format!("duplicate cue label `{}` dropped", cue.label));
                } else {
                    cues.push(cue);
                }
            }
        }
        Ok(EasyAnnotation {
            cues,
            pending,
            warnings,
        })
    }
}

// ---------------------------------------------------------------------------
// batch pipeline

/// Outcome of annotating a batch of raw QA records.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// One sample per input, in input order.
    pub samples: Vec<SampleRecord>,
    pub transport_failures: usize,
    /// Samples routed to review without a usable analysis.
    pub parse_failures: usize,
}

/// Run analysis and easy-task annotation for every record, at most
/// `concurrency` records at a time. Parse failures are routed to human
/// review; transport failures leave the sample Raw.
pub async fn annotate_batch(
    client: &ExpertClient,
    records: &[RawQA],
    concurrency: usize,
) -> BatchOutcome {
    use futures::stream::{self, StreamExt};

    let results: Vec<(SampleRecord, Option<bool>)> = stream::iter(records)
        .map(|qa| async move {
            let base = SampleRecord::new(
                qa.id.clone(),
                qa.image.clone(),
                qa.question.clone(),
                qa.answer.clone(),
            );
            let outcome = match client.analyze(&qa.image, &qa.question).await {
                Ok(a) => client
                    .annotate_easy_tasks(&qa.image, &qa.question, &a)
                    .await
                    .map(|easy| (a, easy)),
                Err(e) => Err(e),
            };
            match outcome {
                Ok((a, easy)) => (base.with_ai(Some(a), Some(easy), ""), None),
                Err(e) if e.is_transport() => {
                    tracing::warn!(id = %qa.id, error = %e, "expert unreachable");
                    let mut rec = base;
                    rec.review_notes = format!("expert transport failure: {e}");
                    (rec, Some(true))
                }
                Err(e) => {
                    tracing::info!(id = %qa.id, error = %e, "routing to human review");
                    (
                        base.with_ai(None, None, &format!("expert failure: {e}")),
                        Some(false),
                    )
                }
            }
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut out = BatchOutcome::default();
    for (rec, failure) in results {
        match failure {
            Some(true) => out.transport_failures += 1,
            Some(false) => out.parse_failures += 1,
            None => {}
        }
        out.samples.push(rec);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{BoundingBox, CuePayload};

    fn g() -> GrammarConfig {
        GrammarConfig::default()
    }

    #[test]
    fn i1_prompt_is_the_template_with_the_question() {
        let p = build_prompt_i1("Which balloon is higher?").unwrap();
        assert!(p.starts_with(
            "For the question:'Which balloon is higher?', identify and focus on the specific physical objects"
        ));
        assert!(p.ends_with("describe it concisely using your own terms."));
        assert!(!p.contains('\n'));
        let q = "Is the dog's ball red?";
        let p = build_prompt_i1(q).unwrap();
        let start = "For the question:'".len();
        let end = p.find("', identify and focus").unwrap();
        assert_eq!(&p[start..end], q);
        assert!(matches!(
            build_prompt_i1("  "),
            Err(ExpertError::EmptyQuestion)
        ));
    }

    #[test]
    fn i2_prompt_joins_tasks() {
        let p = build_prompt_i2("q?", &[Capability::VisualGrounding, Capability::Caption]).unwrap();
        assert!(p.contains("like [Visual Grounding, Caption]"), "{p}");
        assert!(p.ends_with("respond with \"Global Understanding\"."));
        let p = build_prompt_i2("q?", &[Capability::Caption]).unwrap();
        assert!(p.contains("like [Caption],"));
        assert!(matches!(
            build_prompt_i2("q?", &[]),
            Err(ExpertError::EmptyTaskList)
        ));
    }

    #[test]
    fn entity_forms() {
        assert_eq!(
            parse_entities("red balloon\nwhite balloon\n", &g()),
            ["red balloon", "white balloon"]
        );
        assert_eq!(
            parse_entities("red balloon, white balloon, and a cup.", &g()),
            ["red balloon", "white balloon", "a cup"]
        );
        assert_eq!(
            parse_entities("Objects:\n1. cup\n- plate\n* cup", &g()),
            ["cup", "plate"]
        );
        assert!(parse_entities("", &g()).is_empty());
    }

    #[test]
    fn plan_forms() {
        let ents = vec!["red balloon".to_string(), "white balloon".to_string()];
        let (plan, w) = parse_plan("Global Understanding", &ents, &g()).unwrap();
        assert_eq!(
            plan,
            [PlanEntry {
                capability: Capability::GlobalUnderstanding,
                targets: vec![]
            }]
        );
        assert!(w.is_empty());

        let (plan, _) = parse_plan(
            "- visual grounding: red balloon, white balloon\n- CAPTION",
            &ents,
            &g(),
        )
        .unwrap();
        assert_eq!(plan[0].capability, Capability::VisualGrounding);
        assert_eq!(plan[0].targets, ents);
        assert_eq!(
            plan[1],
            PlanEntry {
                capability: Capability::Caption,
                targets: vec![]
            }
        );

        let (plan, w) = parse_plan("Depth Estimation: red balloon", &ents, &g()).unwrap();
        assert_eq!(plan[0].capability, Capability::GlobalUnderstanding);
        assert_eq!(w.len(), 1);

        let (plan, _) = parse_plan(
            "We should use Grounded Caption and then Visual Grounding.",
            &ents,
            &g(),
        )
        .unwrap();
        assert_eq!(
            plan.iter().map(|e| e.capability).collect::<Vec<_>>(),
            [Capability::GroundedCaption, Capability::VisualGrounding]
        );
        assert!(parse_plan("no idea", &ents, &g()).is_none());
    }

    #[test]
    fn analysis_invariant() {
        let a = ExpertAnalysis::from_responses("", "Global Understanding", &g()).unwrap();
        assert!(a.key_entities.is_empty());
        let a = ExpertAnalysis::from_responses("", "Visual Grounding: cup", &g()).unwrap();
        assert_eq!(a.key_entities, ["cup"]);
        assert!(matches!(
            ExpertAnalysis::from_responses("", "Caption", &g()),
            Err(ExpertError::ParseFailure {
                stage: "entities",
                ..
            })
        ));
        let json = serde_json::to_string(&ExpertAnalysis {
            cached: true,
            ..ExpertAnalysis::from_responses("cup", "Caption", &g()).unwrap()
        })
        .unwrap();
        assert!(!json.contains("cached"));
    }

    #[test]
    fn routing_and_grounded_caption_cues() {
        let analysis =
            ExpertAnalysis::from_responses("dog", "Visual Grounding: dog", &g()).unwrap();
        let (reqs, pending) = easy_requests(&analysis);
        assert!(reqs.is_empty());
        assert_eq!(pending, analysis.plan);

        let img = ImageRef::new("i", 100, 100, "x.jpg");
        let req = EasyRequest {
            capability: Capability::GroundedCaption,
            target: None,
        };
        let mut w = Vec::new();
        let cues = easy_cues(&req, "a dog [4, 4, 40, 40] sits", &img, &g(), &mut w);
        assert_eq!(
            cues,
            [VisualCue::boxes(
                "dog",
                vec![BoundingBox::new(4, 4, 40, 40)]
            )]
        );
        let cues = easy_cues(
            &req,
            "a dog [4, 4, 140, 40] and a dog [200, 200, 300, 300]",
            &img,
            &g(),
            &mut w,
        );
        assert_eq!(
            cues,
            [VisualCue::boxes(
                "dog",
                vec![BoundingBox::new(4, 4, 100, 40)]
            )]
        );
        assert_eq!(w.len(), 1);
        let req = EasyRequest {
            capability: Capability::Caption,
            target: Some("cup".into()),
        };
        let cues = easy_cues(&req, " A white cup. ", &img, &g(), &mut w);
        assert_eq!(
            cues[0].payload,
            CuePayload::Caption {
                text: "A white cup.".into()
            }
        );
    }

    #[test]
    fn config_file_and_env() {
        let cfg = ExpertConfig::from_toml(
            "base_url = \"http://h/v1\"\nmax_inflight = 2\ntimeout_ms = 500\n",
        )
        .unwrap();
        assert_eq!(cfg.max_inflight, 2);
        assert_eq!(cfg.timeout, Duration::from_millis(500));
        assert!(ExpertConfig::from_toml("retry_limit = 11").is_err());
        assert!(ExpertConfig::from_toml("max_inflight = 0").is_err());
        assert!(ExpertConfig::from_toml("bogus = 1").is_err());
        let cfg = cfg
            .with_env(|k| (k == "GRIFFONFORGE_EXPERT_MODEL_NAME").then(|| "m2".to_string()))
            .unwrap();
        assert_eq!(cfg.model_name, "m2");
        assert!(ExpertConfig::default()
            .with_env(|k| (k == "GRIFFONFORGE_EXPERT_RETRY_LIMIT").then(|| "x".to_string()))
            .is_err());
    }

    #[test]
    fn cache_roundtrip_and_keys() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::new(dir.path());
        assert!(c.get::<EasyEntry>("easy", "k").is_none());
        c.put("easy", "k", &EasyEntry { raw: "hi".into() }).unwrap();
        assert_eq!(c.get::<EasyEntry>("easy", "k").unwrap().raw, "hi");
        assert_ne!(cache_key(&["ab", "c"]), cache_key(&["a", "bc"]));
    }
}
