//! Human review backend: a lease-based queue over samples carrying expert
//! pre-annotations, a per-sample state machine, an append-only journal and
//! a REST API.
//!
//! States move only along `Raw -> AiAnnotated -> HumanReview -> {Accepted,
//! Rejected}`. Accepted and Rejected samples are immutable.

mod api;
mod journal;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use api::{router, serve};

use crate::eval::score_answer;
use crate::expert::{EasyAnnotation, ExpertAnalysis, PlanEntry};
use crate::geometry::{reason, QuestionForm, ReasonerOptions, SceneGraph, SceneObject};
use crate::grammar::{from_json_str, render_into, sanitize_label, GrammarConfig, RenderError};
use crate::trace::{
    validate_content, validate_cue, validate_trace, Capability, CuePayload, ImageRef,
    ReasoningTrace, TraceKind, UnderstandDirective, Understanding, ValidationReport, VisualCue,
};
use journal::Journal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleState {
    Raw,
    AiAnnotated,
    HumanReview,
    Accepted,
    Rejected,
}

impl SampleState {
    pub const ALL: [SampleState; 5] = [
        SampleState::Raw,
        SampleState::AiAnnotated,
        SampleState::HumanReview,
        SampleState::Accepted,
        SampleState::Rejected,
    ];

    /// The transition relation. Staying put is not a transition.
    pub fn can_transition(self, to: SampleState) -> bool {
        use SampleState::*;
        matches!(
            (self, to),
            (Raw, AiAnnotated)
                | (AiAnnotated, HumanReview)
                | (HumanReview, Accepted)
                | (HumanReview, Rejected)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SampleState::Accepted | SampleState::Rejected)
    }
}

impl fmt::Display for SampleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub reviewer_id: String,
    /// Milliseconds since the Unix epoch.
    pub expiry_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<ExpertAnalysis>,
    /// Merged cue set. Human cues replace AI cues with the same label.
    #[serde(default)]
    pub cues: Vec<VisualCue>,
    /// Plan entries awaiting human cues.
    #[serde(default)]
    pub pending: Vec<PlanEntry>,
    /// Labels whose cue came from a human.
    #[serde(default)]
    pub human_labels: BTreeSet<String>,
    pub state: SampleState,
    #[serde(default)]
    pub review_notes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ReasoningTrace>,
    /// Position in accept order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_seq: Option<u64>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image: ImageRef,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            image,
            question: question.into(),
            answer: answer.into(),
            analysis: None,
            cues: Vec::new(),
            pending: Vec::new(),
            human_labels: BTreeSet::new(),
            state: SampleState::Raw,
            review_notes: String::new(),
            lease: None,
            trace: None,
            accept_seq: None,
        }
    }

    /// Attach expert output and move Raw to AiAnnotated. Samples whose
    /// analysis failed still advance, so a human sees them.
    pub fn with_ai(
        mut self,
        analysis: Option<ExpertAnalysis>,
        easy: Option<EasyAnnotation>,
        notes: &str,
    ) -> Self {
        if let Some(easy) = easy {
            self.cues = easy.cues;
            self.pending = easy.pending;
        } else if let Some(a) = &analysis {
            self.pending = a.plan.clone();
        }
        self.analysis = analysis;
        if !notes.is_empty() {
            self.review_notes = notes.to_string();
        }
        self.state = SampleState::AiAnnotated;
        self
    }

    fn lease_active(&self, now_ms: u64) -> bool {
        self.lease.as_ref().is_some_and(|l| l.expiry_ms > now_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub reviewer_id: String,
    pub cues: Vec<VisualCue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub reviewer_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub notes: String,
    /// Used when the question is outside what the reasoner answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think: Option<String>,
}

impl DecisionRequest {
    pub fn accept(reviewer: &str) -> Self {
        Self {
            reviewer_id: reviewer.into(),
            decision: Decision::Accept,
            notes: String::new(),
            answer: None,
            think: None,
        }
    }

    pub fn reject(reviewer: &str, notes: &str) -> Self {
        Self {
            reviewer_id: reviewer.into(),
            decision: Decision::Reject,
            notes: notes.into(),
            answer: None,
            think: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("no sample `{0}`")]
    NotFound(String),
    #[error("sample `{id}` is {state}; cannot {op}")]
    InvalidState {
        id: String,
        state: SampleState,
        op: &'static str,
    },
    #[error("reviewer `{reviewer}` does not hold the lease on `{id}`")]
    LeaseViolation { id: String, reviewer: String },
    #[error("invalid cue: {report}")]
    InvalidCue {
        report: ValidationReport,
        detail: String,
    },
    #[error("trace invalid: {detail}")]
    TraceInvalid {
        report: ValidationReport,
        detail: String,
    },
    #[error("pending target `{target}` on `{id}` has no human cue")]
    MissingHumanCue { id: String, target: String },
    #[error("line {line}: schema violation at {path}: {reason}")]
    Schema {
        line: usize,
        path: String,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable code used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::DuplicateId(_) => "DuplicateId",
            ServiceError::NotFound(_) => "NotFound",
            ServiceError::InvalidState { .. } => "InvalidState",
            ServiceError::LeaseViolation { .. } => "LeaseViolation",
            ServiceError::InvalidCue { .. } => "InvalidCue",
            ServiceError::TraceInvalid { .. } => "TraceInvalid",
            ServiceError::MissingHumanCue { .. } => "MissingHumanCue",
            ServiceError::Schema { .. } => "SchemaViolation",
            ServiceError::Io(_) => "Io",
        }
    }
}

/// Time source for leases.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Settable clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: String,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub lease_duration: Duration,
    /// Compact the journal into a snapshot after this many events.
    pub snapshot_every: usize,
    /// fsync after every journal append.
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: None,
            lease_duration: Duration::from_secs(15 * 60),
            snapshot_every: 1000,
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueReport {
    pub inserted: usize,
    pub rejected: Vec<RejectedSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub raw: usize,
    pub ai_annotated: usize,
    pub human_review: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub active_leases: usize,
    pub total: usize,
}

struct Inner {
    records: HashMap<String, SampleRecord>,
    /// Queue order: ids in first-insertion order.
    order: Vec<String>,
    next_accept: u64,
    journal: Option<Journal>,
}

impl Inner {
    fn persist(&mut self, id: &str) -> Result<(), ServiceError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&self.records[id])?;
            if j.due_for_snapshot() {
                let all: Vec<&SampleRecord> =
                    self.order.iter().map(|id| &self.records[id]).collect();
                j.compact(all)?;
            }
        }
        Ok(())
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut SampleRecord, ServiceError> {
        self.records
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn insert(&mut self, mut rec: SampleRecord) -> Result<(), ServiceError> {
        if self.records.contains_key(&rec.id) {
            return Err(ServiceError::DuplicateId(rec.id));
        }
        rec.lease = None;
        if let Some(seq) = rec.accept_seq {
            self.next_accept = self.next_accept.max(seq + 1);
        }
        let id = rec.id.clone();
        self.order.push(id.clone());
        self.records.insert(id.clone(), rec);
        self.persist(&id)
    }
}

/// The review store. All mutations are serialized through one write lock;
/// each one is journaled before it returns.
pub struct Store {
    inner: RwLock<Inner>,
    clock: Arc<dyn Clock>,
    lease_duration: Duration,
    grammar: GrammarConfig,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("lease_duration", &self.lease_duration)
            .finish_non_exhaustive()
    }
}

fn transition(
    rec: &mut SampleRecord,
    to: SampleState,
    op: &'static str,
) -> Result<(), ServiceError> {
    if !rec.state.can_transition(to) {
        return Err(ServiceError::InvalidState {
            id: rec.id.clone(),
            state: rec.state,
            op,
        });
    }
    rec.state = to;
    Ok(())
}

fn instruction(cap: Capability, targets: &[String]) -> String {
    let t = targets.join(" and ");
    match cap {
        Capability::Caption if targets.is_empty() => "Describe the image.".into(),
        Capability::Caption => format!("Describe the {t}."),
        Capability::GroundedCaption => format!("Describe the {t} with bounding boxes."),
        Capability::VisualGrounding => format!("Locate the {t}."),
        Capability::TextRecognition => format!("Read the text on the {t}."),
        Capability::Rec => format!("Find the region referred to as {t}."),
        Capability::Reg => format!("Describe the region of the {t}."),
        Capability::GlobalUnderstanding => "Summarize the overall scene.".into(),
    }
}

/// Scene built from the box cues: one object per box, labeled by its cue.
fn scene_from_cues(image: &ImageRef, cues: &[VisualCue]) -> SceneGraph {
    let objects = cues
        .iter()
        .flat_map(|c| match &c.payload {
            CuePayload::Boxes { boxes } => boxes
                .iter()
                .map(|b| SceneObject::new(&c.label, &[], *b))
                .collect(),
            _ => Vec::new(),
        })
        .collect();
    SceneGraph::new(image.clone(), objects)
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>, lease_duration: Duration) -> Self {
        Self::from_parts(Vec::new(), None, clock, lease_duration)
    }

    /// Open (or create) a journaled store under `cfg.data_dir`, replaying
    /// the snapshot and log. Leases never survive a restart.
    pub fn open(cfg: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        match &cfg.data_dir {
            None => Ok(Self::in_memory(clock, cfg.lease_duration)),
            Some(dir) => {
                let (journal, records) = Journal::open(dir, cfg.snapshot_every, cfg.fsync)?;
                Ok(Self::from_parts(
                    records,
                    Some(journal),
                    clock,
                    cfg.lease_duration,
                ))
            }
        }
    }

    /// Replay `dir` into an unjournaled store, leaving the files untouched.
    /// Safe to use while another process serves the same directory.
    pub fn load_read_only(dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let records = Journal::load(dir)?;
        Ok(Self::from_parts(
            records,
            None,
            clock,
            Duration::from_secs(0),
        ))
    }

    fn from_parts(
        records: Vec<SampleRecord>,
        journal: Option<Journal>,
        clock: Arc<dyn Clock>,
        lease_duration: Duration,
    ) -> Self {
        let mut inner = Inner {
            records: HashMap::new(),
            order: Vec::new(),
            next_accept: 0,
            journal: None,
        };
        for mut r in records {
            r.lease = None;
            if let Some(seq) = r.accept_seq {
                inner.next_accept = inner.next_accept.max(seq + 1);
            }
            inner.order.push(r.id.clone());
            inner.records.insert(r.id.clone(), r);
        }
        inner.journal = journal;
        Self {
            inner: RwLock::new(inner),
            clock,
            lease_duration,
            grammar: GrammarConfig::default(),
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Insert fresh samples (Raw or AiAnnotated). Duplicates and samples in
    /// other states are reported per id and skipped.
    pub fn enqueue(
        &self,
        samples: impl IntoIterator<Item = SampleRecord>,
    ) -> Result<EnqueueReport, ServiceError> {
        let mut inner = self.inner.write();
        let mut report = EnqueueReport::default();
        for mut s in samples {
            if !matches!(s.state, SampleState::Raw | SampleState::AiAnnotated) {
                report.rejected.push(RejectedSample {
                    error: format!(
                        "sample is {}; only Raw or AiAnnotated can be enqueued",
                        s.state
                    ),
                    id: s.id,
                });
                continue;
            }
            s.trace = None;
            s.accept_seq = None;
            match inner.insert(s) {
                Ok(()) => report.inserted += 1,
                Err(ServiceError::DuplicateId(id)) => {
                    tracing::warn!(%id, "duplicate sample id");
                    report.rejected.push(RejectedSample {
                        error: ServiceError::DuplicateId(id.clone()).to_string(),
                        id,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    /// Insert previously exported samples in any state. Accepted samples
    /// must carry a trace that validates against their image.
    pub fn import(
        &self,
        samples: impl IntoIterator<Item = SampleRecord>,
    ) -> Result<EnqueueReport, ServiceError> {
        let mut inner = self.inner.write();
        let mut report = EnqueueReport::default();
        for s in samples {
            if s.state == SampleState::Accepted {
                let ok = s
                    .trace
                    .as_ref()
                    .is_some_and(|t| validate_trace(t, &s.image).is_valid())
                    && s.accept_seq.is_some();
                if !ok {
                    report.rejected.push(RejectedSample {
                        error: "accepted sample lacks a valid trace or accept_seq".into(),
                        id: s.id,
                    });
                    continue;
                }
            }
            let id = s.id.clone();
            match inner.insert(s) {
                Ok(()) => report.inserted += 1,
                Err(ServiceError::DuplicateId(_)) => report.rejected.push(RejectedSample {
                    error: ServiceError::DuplicateId(id.clone()).to_string(),
                    id,
                }),
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    /// Raw -> AiAnnotated with the expert's output attached.
    pub fn attach_ai(
        &self,
        id: &str,
        analysis: Option<ExpertAnalysis>,
        easy: Option<EasyAnnotation>,
        notes: &str,
    ) -> Result<SampleRecord, ServiceError> {
        let mut inner = self.inner.write();
        let rec = inner.get_mut(id)?;
        if rec.state != SampleState::Raw {
            return Err(ServiceError::InvalidState {
                id: id.to_string(),
                state: rec.state,
                op: "attach expert output",
            });
        }
        *rec = rec.clone().with_ai(analysis, easy, notes);
        let out = rec.clone();
        inner.persist(id)?;
        Ok(out)
    }

    /// Lease the oldest reviewable sample without an active lease.
    pub fn next_for_review(&self, reviewer_id: &str) -> Result<Option<SampleRecord>, ServiceError> {
        let now = self.now_ms();
        let mut inner = self.inner.write();
        let Some(id) = inner
            .order
            .iter()
            .find(|id| {
                let r = &inner.records[*id];
                matches!(r.state, SampleState::AiAnnotated | SampleState::HumanReview)
                    && !r.lease_active(now)
            })
            .cloned()
        else {
            return Ok(None);
        };
        let expiry_ms = now.saturating_add(self.lease_duration.as_millis() as u64);
        let rec = inner.get_mut(&id)?;
        let moved = rec.state == SampleState::AiAnnotated;
        if moved {
            transition(rec, SampleState::HumanReview, "start review")?;
        }
        rec.lease = Some(Lease {
            reviewer_id: reviewer_id.to_string(),
            expiry_ms,
        });
        let out = rec.clone();
        if moved {
            inner.persist(&id)?;
        }
        Ok(Some(out))
    }

    fn check_lease(
        rec: &SampleRecord,
        reviewer_id: &str,
        now: u64,
        op: &'static str,
    ) -> Result<(), ServiceError> {
        if rec.state != SampleState::HumanReview {
            return Err(ServiceError::InvalidState {
                id: rec.id.clone(),
                state: rec.state,
                op,
            });
        }
        match &rec.lease {
            Some(l) if l.reviewer_id == reviewer_id && l.expiry_ms > now => Ok(()),
            _ => Err(ServiceError::LeaseViolation {
                id: rec.id.clone(),
                reviewer: reviewer_id.to_string(),
            }),
        }
    }

    /// Validate human cues and merge them by label. Also renews the lease.
    pub fn submit_annotation(
        &self,
        id: &str,
        reviewer_id: &str,
        cues: Vec<VisualCue>,
    ) -> Result<SampleRecord, ServiceError> {
        let now = self.now_ms();
        let mut inner = self.inner.write();
        let rec = inner.get_mut(id)?;
        Self::check_lease(rec, reviewer_id, now, "annotate")?;
        let mut report = ValidationReport::default();
        let mut bad_labels = Vec::new();
        for (i, c) in cues.iter().enumerate() {
            validate_cue(c, Some(&rec.image), &format!("cues[{i}]"), &mut report);
            if !c.label.trim().is_empty()
                && sanitize_label(&c.label, &self.grammar).as_deref() != Some(c.label.as_str())
            {
                bad_labels.push(format!("label `{}` contains reserved characters", c.label));
            }
        }
        if !report.is_valid() || !bad_labels.is_empty() {
            return Err(ServiceError::InvalidCue {
                detail: if bad_labels.is_empty() {
                    report.to_string()
                } else {
                    bad_labels.join("; ")
                },
                report,
            });
        }
        for c in cues {
            rec.human_labels.insert(c.label.clone());
            match rec.cues.iter_mut().find(|e| e.label == c.label) {
                Some(existing) => *existing = c,
                None => rec.cues.push(c),
            }
        }
        if let Some(l) = rec.lease.as_mut() {
            l.expiry_ms = now.saturating_add(self.lease_duration.as_millis() as u64);
        }
        let out = rec.clone();
        inner.persist(id)?;
        Ok(out)
    }

    /// Accept (synthesizing and validating the final trace) or reject.
    pub fn decide(&self, id: &str, req: &DecisionRequest) -> Result<SampleRecord, ServiceError> {
        let now = self.now_ms();
        let mut inner = self.inner.write();
        let next_accept = inner.next_accept;
        let rec = inner.get_mut(id)?;
        Self::check_lease(rec, &req.reviewer_id, now, "decide")?;
        match req.decision {
            Decision::Reject => {
                transition(rec, SampleState::Rejected, "reject")?;
                rec.review_notes = req.notes.clone();
            }
            Decision::Accept => {
                let (trace, note) = synthesize_trace(rec, req, &self.grammar)?;
                transition(rec, SampleState::Accepted, "accept")?;
                rec.trace = Some(trace);
                rec.accept_seq = Some(next_accept);
                rec.review_notes = [req.notes.as_str(), note.as_deref().unwrap_or("")]
                    .iter()
                    .filter(|s| !s.is_empty())
                    .copied()
                    .collect::<Vec<_>>()
                    .join("\n");
            }
        }
        rec.lease = None;
        let out = rec.clone();
        if req.decision == Decision::Accept {
            inner.next_accept += 1;
        }
        inner.persist(id)?;
        Ok(out)
    }

    pub fn get(&self, id: &str) -> Option<SampleRecord> {
        self.inner.read().records.get(id).cloned()
    }

    /// All records in queue order.
    pub fn all(&self) -> Vec<SampleRecord> {
        let inner = self.inner.read();
        inner
            .order
            .iter()
            .map(|id| inner.records[id].clone())
            .collect()
    }

    pub fn stats(&self) -> ServiceStats {
        let now = self.now_ms();
        let inner = self.inner.read();
        let mut s = ServiceStats::default();
        for r in inner.records.values() {
            s.total += 1;
            *match r.state {
                SampleState::Raw => &mut s.raw,
                SampleState::AiAnnotated => &mut s.ai_annotated,
                SampleState::HumanReview => &mut s.human_review,
                SampleState::Accepted => &mut s.accepted,
                SampleState::Rejected => &mut s.rejected,
            } += 1;
            if r.lease_active(now) {
                s.active_leases += 1;
            }
        }
        s
    }

    /// JSONL of accepted samples in accept order. Returns the count.
    pub fn export_accepted(&self, mut out: impl Write) -> Result<usize, ServiceError> {
        let mut accepted: Vec<SampleRecord> = self
            .inner
            .read()
            .records
            .values()
            .filter(|r| r.state == SampleState::Accepted)
            .cloned()
            .collect();
        accepted.sort_by_key(|r| r.accept_seq);
        for r in &accepted {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(accepted.len())
    }

    /// Write a snapshot and truncate the log. No-op in memory.
    pub fn compact(&self) -> Result<(), ServiceError> {
        let mut inner = self.inner.write();
        let Inner {
            records,
            order,
            journal,
            ..
        } = &mut *inner;
        if let Some(j) = journal.as_mut() {
            j.compact(order.iter().map(|id| &records[id]).collect())?;
        }
        Ok(())
    }
}

fn synthesize_trace(
    rec: &SampleRecord,
    req: &DecisionRequest,
    grammar: &GrammarConfig,
) -> Result<(ReasoningTrace, Option<String>), ServiceError> {
    for entry in &rec.pending {
        for t in &entry.targets {
            if !rec.human_labels.contains(t) {
                return Err(ServiceError::MissingHumanCue {
                    id: rec.id.clone(),
                    target: t.clone(),
                });
            }
        }
    }
    let labels: HashSet<&str> = rec.cues.iter().map(|c| c.label.as_str()).collect();
    let directives: Vec<UnderstandDirective> = rec
        .analysis
        .iter()
        .flat_map(|a| &a.plan)
        .filter_map(|e| {
            let targets: Vec<String> = e
                .targets
                .iter()
                .filter(|t| labels.contains(t.as_str()))
                .cloned()
                .collect();
            (!targets.is_empty() || e.capability.allows_no_targets()).then(|| UnderstandDirective {
                capability: e.capability,
                instruction_text: instruction(e.capability, &targets),
                targets,
            })
        })
        .collect();

    let mut note = None;
    let reasoned = QuestionForm::parse(&rec.question).and_then(|form| {
        let scene = scene_from_cues(&rec.image, &rec.cues);
        reason(&form, &scene, &ReasonerOptions::default())
            .ok()
            .map(|r| (form, r))
    });
    let (think, answer) = match reasoned {
        Some((form, r)) => {
            if !score_answer(&r.answer, &rec.answer, form.question_type()) {
                note = Some(format!(
                    "reasoned answer `{}` differs from source answer `{}`",
                    r.answer, rec.answer
                ));
            }
            (r.think, r.answer)
        }
        None => {
            let answer = req.answer.clone().unwrap_or_else(|| rec.answer.clone());
            let think = req
                .think
                .clone()
                .filter(|t| !t.trim().is_empty())
                .unwrap_or_else(|| format!("Based on the gathered cues, the answer is {answer}."));
            (think, answer)
        }
    };
    let trace = ReasoningTrace {
        kind: TraceKind::Unified,
        understand: Understanding {
            directives,
            cues: rec.cues.clone(),
        },
        think,
        answer,
        raw_text: String::new(),
    };
    let rendered = match render_into(trace.clone(), grammar) {
        Ok(t) => t,
        Err(e) => {
            let mut report = validate_content(&trace);
            for (i, c) in trace.understand.cues.iter().enumerate() {
                validate_cue(
                    c,
                    Some(&rec.image),
                    &format!("understand.cues[{i}]"),
                    &mut report,
                );
            }
            let detail = match e {
                RenderError::InvalidTrace(s) => s,
                other => other.to_string(),
            };
            return Err(ServiceError::TraceInvalid { report, detail });
        }
    };
    let report = validate_trace(&rendered, &rec.image);
    if !report.is_valid() {
        return Err(ServiceError::TraceInvalid {
            detail: report.to_string(),
            report,
        });
    }
    Ok((rendered, note))
}

/// Read SampleRecord JSONL. Blank lines are skipped.
pub fn read_samples(reader: impl BufRead) -> Result<Vec<SampleRecord>, ServiceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json_str(&line).map_err(|v| ServiceError::Schema {
            line: i + 1,
            path: v.path,
            reason: v.reason,
        })?);
    }
    Ok(out)
}
