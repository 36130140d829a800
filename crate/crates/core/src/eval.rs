//! Evaluation harness: benchmark loading, single-pass and toolkit-style
//! runs against a pluggable model backend, answer scoring, and per-case
//! call and latency accounting.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{image_part, text_part, ChatMessage, ChatRequest, ChatResponse};
use crate::geometry::{reason, QuestionForm, ReasonerOptions, SceneGraph};
use crate::grammar::{
    extract_answer, from_json_str, parse, render_into, GrammarConfig, SchemaViolation,
};
use crate::trace::{ImageRef, ReasoningTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Spatial,
    Count,
    Existence,
    Attribute,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::Spatial => "spatial",
            QuestionType::Count => "count",
            QuestionType::Existence => "existence",
            QuestionType::Attribute => "attribute",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    pub question_type: QuestionType,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneGraph>,
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("line {line}: schema violation at {path}: {reason}")]
    SchemaViolation {
        line: usize,
        path: String,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read a JSONL benchmark, one case per line. Blank lines are skipped.
pub fn read_benchmark(reader: impl BufRead) -> Result<Vec<EvalCase>, BenchmarkError> {
    let mut cases = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase = from_json_str(&line).map_err(|SchemaViolation { path, reason }| {
            BenchmarkError::SchemaViolation {
                line: i + 1,
                path,
                reason,
            }
        })?;
        if case.gold_answer.trim().is_empty() {
            return Err(BenchmarkError::SchemaViolation {
                line: i + 1,
                path: "/gold_answer".into(),
                reason: "empty".into(),
            });
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Vec<EvalCase>, BenchmarkError> {
    let file = std::fs::File::open(path)?;
    read_benchmark(std::io::BufReader::new(file))
}

pub fn write_benchmark(cases: &[EvalCase], mut out: impl Write) -> std::io::Result<()> {
    for c in cases {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scoring

const NUMBER_WORDS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

fn normalize_answer(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_string()
}

fn as_count(s: &str) -> Option<u64> {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        return s.parse().ok();
    }
    NUMBER_WORDS.iter().position(|w| *w == s).map(|n| n as u64)
}

/// Compare a predicted answer against the gold answer.
pub fn score_answer(predicted: &str, gold: &str, question_type: QuestionType) -> bool {
    let mut p = normalize_answer(predicted);
    let mut g = normalize_answer(gold);
    match question_type {
        QuestionType::Existence | QuestionType::Spatial => {
            for s in [&mut p, &mut g] {
                match s.as_str() {
                    "true" => *s = "yes".into(),
                    "false" => *s = "no".into(),
                    _ => {}
                }
            }
        }
        QuestionType::Count => {
            if let (Some(a), Some(b)) = (as_count(&p), as_count(&g)) {
                return a == b;
            }
        }
        QuestionType::Attribute => {}
    }
    p == g
}

// ---------------------------------------------------------------------------
// backends

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// The backend cannot be reached; the run is aborted.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// This one request failed; the case is scored incorrect.
    #[error("generation failed: {0}")]
    Failed(String),
}

/// A model that maps an image and a question to a raw trace string.
/// One `generate` call is one model call.
pub trait ModelClient: Send + Sync {
    fn tag(&self) -> String;
    fn generate(
        &self,
        image: &ImageRef,
        question: &str,
        grammar: &GrammarConfig,
    ) -> Result<String, BackendError>;
}

/// The geometric reasoner standing in for a model; needs a scene per image.
pub struct OracleModel {
    scenes: HashMap<String, SceneGraph>,
    opts: ReasonerOptions,
}

impl OracleModel {
    pub fn new(scenes: impl IntoIterator<Item = SceneGraph>, opts: ReasonerOptions) -> Self {
        Self {
            scenes: scenes
                .into_iter()
                .map(|s| (s.image.id.clone(), s))
                .collect(),
            opts,
        }
    }

    pub fn from_cases(cases: &[EvalCase]) -> Self {
        Self::new(
            cases.iter().filter_map(|c| c.scene.clone()),
            ReasonerOptions::default(),
        )
    }
}

impl ModelClient for OracleModel {
    fn tag(&self) -> String {
        "oracle".into()
    }

    fn generate(
        &self,
        image: &ImageRef,
        question: &str,
        grammar: &GrammarConfig,
    ) -> Result<String, BackendError> {
        let scene = self
            .scenes
            .get(&image.id)
            .ok_or_else(|| BackendError::Failed(format!("no scene for image `{}`", image.id)))?;
        let form = QuestionForm::parse(question)
            .ok_or_else(|| BackendError::Failed(format!("unsupported question `{question}`")))?;
        let reasoning =
            reason(&form, scene, &self.opts).map_err(|e| BackendError::Failed(e.to_string()))?;
        let trace = reasoning
            .into_trace(grammar)
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(trace.raw_text)
    }
}

/// Scripted model that renders gold traces, optionally corrupting the
/// answer of a seeded random fraction of cases.
pub struct MockModel {
    gold: HashMap<(String, String), GoldEntry>,
    corruption_rate: f64,
    seed: u64,
    opts: ReasonerOptions,
}

struct GoldEntry {
    answer: String,
    question_type: QuestionType,
    scene: Option<SceneGraph>,
}

impl MockModel {
    pub fn new(cases: &[EvalCase], corruption_rate: f64, seed: u64) -> Self {
        let gold = cases
            .iter()
            .map(|c| {
                (
                    (c.image.id.clone(), c.question.clone()),
                    GoldEntry {
                        answer: c.gold_answer.clone(),
                        question_type: c.question_type,
                        scene: c.scene.clone(),
                    },
                )
            })
            .collect();
        Self {
            gold,
            corruption_rate: corruption_rate.clamp(0.0, 1.0),
            seed,
            opts: ReasonerOptions::default(),
        }
    }

    /// Whether the case keyed by `(image_id, question)` gets a wrong answer.
    pub fn is_corrupted(&self, image_id: &str, question: &str) -> bool {
        if self.corruption_rate <= 0.0 {
            return false;
        }
        let mut h = Fnv::new();
        h.write(&self.seed.to_le_bytes());
        h.write(image_id.as_bytes());
        h.write(&[0]);
        h.write(question.as_bytes());
        ChaCha8Rng::seed_from_u64(h.finish()).random_bool(self.corruption_rate)
    }

    fn gold_trace(
        &self,
        entry: &GoldEntry,
        question: &str,
        answer: String,
        grammar: &GrammarConfig,
    ) -> ReasoningTrace {
        let from_scene = entry.scene.as_ref().and_then(|scene| {
            let form = QuestionForm::parse(question)?;
            let mut r = reason(&form, scene, &self.opts).ok()?;
            r.answer = answer.clone();
            r.into_trace(grammar).ok()
        });
        from_scene.unwrap_or_else(|| {
            render_into(ReasoningTrace::shortcut(answer.clone()), grammar)
                .unwrap_or_else(|_| ReasoningTrace::shortcut(answer))
        })
    }
}

/// Deterministically wrong version of an answer.
pub fn corrupt_answer(answer: &str, question_type: QuestionType) -> String {
    let norm = normalize_answer(answer);
    match norm.as_str() {
        "yes" | "true" => return "no".into(),
        "no" | "false" => return "yes".into(),
        _ => {}
    }
    if question_type == QuestionType::Count {
        if let Some(n) = as_count(&norm) {
            return (n + 1).to_string();
        }
    }
    format!("not {norm}")
}

impl ModelClient for MockModel {
    fn tag(&self) -> String {
        format!("mock(corruption={})", self.corruption_rate)
    }

    fn generate(
        &self,
        image: &ImageRef,
        question: &str,
        grammar: &GrammarConfig,
    ) -> Result<String, BackendError> {
        let Some(entry) = self.gold.get(&(image.id.clone(), question.to_string())) else {
            return Err(BackendError::Failed(format!(
                "no gold entry for `{question}`"
            )));
        };
        let answer = if self.is_corrupted(&image.id, question) {
            corrupt_answer(&entry.answer, entry.question_type)
        } else {
            entry.answer.clone()
        };
        Ok(self.gold_trace(entry, question, answer, grammar).raw_text)
    }
}

/// A chat-completion endpoint asked to answer in the trace grammar.
pub struct HttpModel {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpModel {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
        })
    }
}

impl ModelClient for HttpModel {
    fn tag(&self) -> String {
        format!("http({})", self.model)
    }

    fn generate(
        &self,
        image: &ImageRef,
        question: &str,
        grammar: &GrammarConfig,
    ) -> Result<String, BackendError> {
        let instruction = format!(
            "{question}\nRespond in three parts introduced by the lines `{}`, `{}` and `{}`.",
            grammar.understand_marker, grammar.think_marker, grammar.answer_marker
        );
        let image = image_part(image).map_err(|e| BackendError::Failed(format!("image: {e}")))?;
        let body = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(vec![image, text_part(instruction)])],
            temperature: 0.0,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(BackendError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Failed(format!("status {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        parsed
            .into_text()
            .ok_or_else(|| BackendError::Failed("empty choices".into()))
    }
}

// ---------------------------------------------------------------------------
// runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One model call per case.
    Unified,
    /// Planning call, tool calls, answer call.
    Toolkit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTiming {
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub model_calls: u32,
    /// Why no answer could be scored, if so.
    pub failure: Option<String>,
    /// Strict trace-parse error code; the answer may still have been
    /// recovered leniently.
    pub parse_error: Option<String>,
    pub timing: CaseTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub mean_time_per_sample_s: f64,
    pub total_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub backend_tag: String,
    pub mode: RunMode,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub model_calls: u64,
    /// Set when the backend became unavailable and the run stopped early.
    pub aborted: Option<String>,
    pub per_case: Vec<CaseResult>,
    pub timing: RunTiming,
}

impl RunReport {
    pub fn mean_time_per_sample(&self) -> Duration {
        Duration::from_secs_f64(self.timing.mean_time_per_sample_s)
    }

    /// Plain-text table: one row per case, then the summary.
    pub fn render_table(&self) -> String {
        let id_w = self
            .per_case
            .iter()
            .map(|c| c.id.len())
            .max()
            .unwrap_or(2)
            .max(2);
        let pred_w = self
            .per_case
            .iter()
            .map(|c| {
                c.predicted
                    .as_deref()
                    .unwrap_or("-")
                    .chars()
                    .count()
                    .min(24)
            })
            .max()
            .unwrap_or(9)
            .max(9);
        let mut out = format!(
            "{:<id_w$}  {:<pred_w$}  {:<7}  {:>5}  {:>10}\n",
            "id", "predicted", "correct", "calls", "time_s"
        );
        for c in &self.per_case {
            let pred: String = c
                .predicted
                .as_deref()
                .unwrap_or("-")
                .chars()
                .take(24)
                .collect();
            let pred = pred.replace('\n', " ");
            out.push_str(&format!(
                "{:<id_w$}  {:<pred_w$}  {:<7}  {:>5}  {:>10.6}\n",
                c.id,
                pred,
                if c.correct { "yes" } else { "no" },
                c.model_calls,
                c.timing.wall_time_s
            ));
        }
        out.push_str(&format!(
            "\nbackend: {}  mode: {:?}\naccuracy: {:.4} ({}/{})  model calls: {}  mean time/sample: {:.6}s\n",
            self.backend_tag,
            self.mode,
            self.accuracy,
            self.correct,
            self.total,
            self.model_calls,
            self.timing.mean_time_per_sample_s
        ));
        if let Some(reason) = &self.aborted {
            out.push_str(&format!("ABORTED: {reason}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub grammar: GrammarConfig,
    /// Cases evaluated concurrently.
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig::default(),
            parallelism: 1,
        }
    }
}

/// Single-pass evaluation: exactly one `generate` call per case.
pub fn run(cases: &[EvalCase], backend: &dyn ModelClient, cfg: &EvalConfig) -> RunReport {
    run_with(cases, backend, cfg, RunMode::Unified, |case| {
        let start = Instant::now();
        let out = backend.generate(&case.image, &case.question, &cfg.grammar);
        (out, 1, start.elapsed())
    })
}

/// Multi-call baseline: a planning call, `n_tools` tool calls each taking
/// `tool_latency`, then an answer call. Answers come from the answer call.
pub fn run_toolkit_baseline(
    cases: &[EvalCase],
    backend: &dyn ModelClient,
    tool_latency: Duration,
    n_tools: u32,
    cfg: &EvalConfig,
) -> RunReport {
    let n_tools = n_tools.max(1);
    run_with(cases, backend, cfg, RunMode::Toolkit, |case| {
        let start = Instant::now();
        if let Err(e) = backend.generate(&case.image, &case.question, &cfg.grammar) {
            return (Err(e), 1, start.elapsed());
        }
        for _ in 0..n_tools {
            std::thread::sleep(tool_latency);
        }
        let out = backend.generate(&case.image, &case.question, &cfg.grammar);
        (out, n_tools + 2, start.elapsed())
    })
}

type CallOutcome = (Result<String, BackendError>, u32, Duration);

fn run_with<F>(
    cases: &[EvalCase],
    backend: &dyn ModelClient,
    cfg: &EvalConfig,
    mode: RunMode,
    call: F,
) -> RunReport
where
    F: Fn(&EvalCase) -> CallOutcome + Sync,
{
    let slots: Vec<Mutex<Option<CaseResult>>> = cases.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let abort_reason: Mutex<Option<String>> = Mutex::new(None);
    let workers = cfg.parallelism.clamp(1, cases.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(case) = cases.get(i) else { return };
                let (out, calls, elapsed) = call(case);
                if let Err(BackendError::Unavailable(reason)) = &out {
                    abort.store(true, Ordering::SeqCst);
                    abort_reason
                        .lock()
                        .expect("poisoned")
                        .get_or_insert_with(|| reason.clone());
                    return;
                }
                let result = score_case(case, out, calls, elapsed, &cfg.grammar);
                *slots[i].lock().expect("poisoned") = Some(result);
            });
        }
    });

    let per_case: Vec<CaseResult> = slots
        .into_iter()
        .filter_map(|s| s.into_inner().expect("poisoned"))
        .collect();
    let total = per_case.len();
    let correct = per_case.iter().filter(|c| c.correct).count();
    let total_time: f64 = per_case.iter().map(|c| c.timing.wall_time_s).sum();
    RunReport {
        backend_tag: backend.tag(),
        mode,
        total,
        correct,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        model_calls: per_case.iter().map(|c| u64::from(c.model_calls)).sum(),
        aborted: abort_reason.into_inner().expect("poisoned"),
        per_case,
        timing: RunTiming {
            mean_time_per_sample_s: if total == 0 {
                0.0
            } else {
                total_time / total as f64
            },
            total_time_s: total_time,
        },
    }
}

fn score_case(
    case: &EvalCase,
    out: Result<String, BackendError>,
    calls: u32,
    elapsed: Duration,
    grammar: &GrammarConfig,
) -> CaseResult {
    let timing = CaseTiming {
        wall_time_s: elapsed.as_secs_f64(),
    };
    let raw = match out {
        Ok(raw) => raw,
        Err(e) => {
            return CaseResult {
                id: case.id.clone(),
                predicted: None,
                correct: false,
                model_calls: calls,
                failure: Some(format!("BACKEND_ERROR: {e}")),
                parse_error: None,
                timing,
            }
        }
    };
    let (predicted, parse_error) = match parse(&raw, grammar) {
        Ok((trace, _)) => (Some(trace.answer), None),
        Err(e) => (extract_answer(&raw, grammar), Some(e.code().to_string())),
    };
    let correct = predicted
        .as_deref()
        .is_some_and(|p| score_answer(p, &case.gold_answer, case.question_type));
    CaseResult {
        id: case.id.clone(),
        failure: predicted.is_none().then(|| "NO_ANSWER".to_string()),
        predicted,
        correct,
        model_calls: calls,
        parse_error,
        timing,
    }
}

/// 64-bit FNV-1a, for stable seeding across platforms and releases.
#[derive(Debug, Clone)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
