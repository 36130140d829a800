//! Value types for understand-think-answer reasoning traces.
//!
//! A [`ReasoningTrace`] is the flat generated sequence together with its
//! structured view: the understanding part (directives that say which
//! capability to apply to which entities, and the visual cues gathered by
//! applying them), the free-text thinking part, and the final answer.
//!
//! Coordinates are absolute integer pixels in source-image space,
//! `[x1, y1, x2, y2]` with a top-left origin.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned box in absolute image pixels, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BoundingBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    /// Area in square pixels; zero for degenerate boxes.
    pub fn area(&self) -> i64 {
        self.width().max(0).saturating_mul(self.height().max(0))
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn diagonal(&self) -> f64 {
        (self.width() as f64).hypot(self.height() as f64)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() < 1 || self.height() < 1
    }

    pub fn fits(&self, image: &ImageRef) -> bool {
        self.x1 >= 0
            && self.y1 >= 0
            && self.x2 <= i64::from(image.width)
            && self.y2 <= i64::from(image.height)
    }

    /// Area of the intersection with `other`.
    pub fn intersection_area(&self, other: &BoundingBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0 || h <= 0 {
            0
        } else {
            w.saturating_mul(h)
        }
    }

    /// `self ⊆ other`, boundaries included.
    pub fn within(&self, other: &BoundingBox) -> bool {
        other.x1 <= self.x1 && other.y1 <= self.y1 && self.x2 <= other.x2 && self.y2 <= other.y2
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[i64; 4]> for BoundingBox {
    fn from(v: [i64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.as_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Reference to a source image. `uri` is a local path or a URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, width: u32, height: u32, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            uri: uri.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoxError {
    #[error("box {0} is degenerate after clipping")]
    DegenerateBox(BoundingBox),
}

/// Intersect `bbox` with the image rectangle `[0, W] x [0, H]`.
pub fn clip_box(bbox: &BoundingBox, image: &ImageRef) -> Result<BoundingBox, BoxError> {
    let w = i64::from(image.width);
    let h = i64::from(image.height);
    let clipped = BoundingBox::new(
        bbox.x1.clamp(0, w),
        bbox.y1.clamp(0, h),
        bbox.x2.clamp(0, w),
        bbox.y2.clamp(0, h),
    );
    if clipped.is_degenerate() {
        return Err(BoxError::DegenerateBox(*bbox));
    }
    Ok(clipped)
}

/// Intrinsic model capability used to gather a visual cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Capability {
    Caption,
    GroundedCaption,
    VisualGrounding,
    TextRecognition,
    Rec,
    Reg,
    GlobalUnderstanding,
}

impl Capability {
    pub const ALL: [Capability; 7] = [
        Capability::Caption,
        Capability::GroundedCaption,
        Capability::VisualGrounding,
        Capability::TextRecognition,
        Capability::Rec,
        Capability::Reg,
        Capability::GlobalUnderstanding,
    ];

    /// Human-readable name, as used in prompts and rendered traces.
    pub fn name(self) -> &'static str {
        match self {
            Capability::Caption => "Caption",
            Capability::GroundedCaption => "Grounded Caption",
            Capability::VisualGrounding => "Visual Grounding",
            Capability::TextRecognition => "Text Recognition",
            Capability::Rec => "REC",
            Capability::Reg => "REG",
            Capability::GlobalUnderstanding => "Global Understanding",
        }
    }

    /// Capabilities whose directives may omit targets.
    pub fn allows_no_targets(self) -> bool {
        matches!(self, Capability::Caption | Capability::GlobalUnderstanding)
    }

    /// Case- and separator-insensitive lookup. Returns `None` for unknown names.
    pub fn lookup(name: &str) -> Option<Capability> {
        let key = squash(name);
        if key.is_empty() {
            return None;
        }
        Capability::ALL
            .into_iter()
            .find(|c| squash(c.name()) == key)
            .or(match key.as_str() {
                "grounding" | "visualgrounding" => Some(Capability::VisualGrounding),
                "ocr" => Some(Capability::TextRecognition),
                "referringexpressioncomprehension" => Some(Capability::Rec),
                "referringexpressiongeneration" => Some(Capability::Reg),
                _ => None,
            })
    }

    /// Lenient lookup for expert output: unknown names map to
    /// [`Capability::GlobalUnderstanding`] and the returned flag is set.
    pub fn from_expert(name: &str) -> (Capability, bool) {
        match Capability::lookup(name) {
            Some(c) => (c, false),
            None => (Capability::GlobalUnderstanding, true),
        }
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown capability `{0}`")]
pub struct UnknownCapability(pub String);

impl FromStr for Capability {
    type Err = UnknownCapability;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownCapability(s.to_string()))
    }
}

impl Serialize for Capability {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnderstandDirective {
    pub capability: Capability,
    pub targets: Vec<String>,
    #[serde(rename = "instruction")]
    pub instruction_text: String,
}

/// What a cue carries. `None` means the sought entity was not found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CuePayload {
    Boxes { boxes: Vec<BoundingBox> },
    Text { text: String },
    Caption { text: String },
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualCue {
    pub label: String,
    pub payload: CuePayload,
}

impl VisualCue {
    pub fn boxes(label: impl Into<String>, boxes: Vec<BoundingBox>) -> Self {
        Self {
            label: label.into(),
            payload: CuePayload::Boxes { boxes },
        }
    }

    pub fn text(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            payload: CuePayload::Text { text: text.into() },
        }
    }

    pub fn caption(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            payload: CuePayload::Caption { text: text.into() },
        }
    }

    pub fn none(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            payload: CuePayload::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// Answer only, no understanding or thinking.
    Shortcut,
    Unified,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Understanding {
    pub directives: Vec<UnderstandDirective>,
    pub cues: Vec<VisualCue>,
}

impl Understanding {
    pub fn is_empty(&self) -> bool {
        self.directives.is_empty() && self.cues.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub kind: TraceKind,
    pub understand: Understanding,
    pub think: String,
    pub answer: String,
    pub raw_text: String,
}

impl ReasoningTrace {
    /// A shortcut trace: the answer alone.
    pub fn shortcut(answer: impl Into<String>) -> Self {
        let answer = answer.into();
        Self {
            kind: TraceKind::Shortcut,
            understand: Understanding::default(),
            think: String::new(),
            raw_text: answer.clone(),
            answer,
        }
    }
}

/// Machine-readable violation codes reported by [`validate_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptyAnswer,
    EmptyThink,
    EmptyUnderstand,
    EmptyRawText,
    ShortcutHasReasoning,
    EmptyInstruction,
    DirectiveNoTargets,
    DirectiveTargetUncovered,
    EmptyLabel,
    EmptyBoxes,
    BboxDegenerate,
    BboxOutOfRange,
    SegmentMissing,
    SegmentOrder,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::EmptyAnswer => "EMPTY_ANSWER",
            ViolationCode::EmptyThink => "EMPTY_THINK",
            ViolationCode::EmptyUnderstand => "EMPTY_UNDERSTAND",
            ViolationCode::EmptyRawText => "EMPTY_RAW_TEXT",
            ViolationCode::ShortcutHasReasoning => "SHORTCUT_HAS_REASONING",
            ViolationCode::EmptyInstruction => "EMPTY_INSTRUCTION",
            ViolationCode::DirectiveNoTargets => "DIRECTIVE_NO_TARGETS",
            ViolationCode::DirectiveTargetUncovered => "DIRECTIVE_TARGET_UNCOVERED",
            ViolationCode::EmptyLabel => "EMPTY_LABEL",
            ViolationCode::EmptyBoxes => "EMPTY_BOXES",
            ViolationCode::BboxDegenerate => "BBOX_DEGENERATE",
            ViolationCode::BboxOutOfRange => "BBOX_OUT_OF_RANGE",
            ViolationCode::SegmentMissing => "SEGMENT_MISSING",
            ViolationCode::SegmentOrder => "SEGMENT_ORDER",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Where in the trace, e.g. `understand.cues[2].boxes[0]`.
    pub path: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    fn push(&mut self, code: ViolationCode, path: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            path: path.into(),
            detail: detail.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} at {}: {}", v.code, v.path, v.detail)?;
        }
        Ok(())
    }
}

/// Check every trace invariant that does not depend on the image.
pub fn validate_structure(trace: &ReasoningTrace) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_structure(trace, None, true, &mut report);
    report
}

/// Like [`validate_structure`] but ignores `raw_text`; used before rendering.
pub fn validate_content(trace: &ReasoningTrace) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_structure(trace, None, false, &mut report);
    report
}

/// Check every trace invariant, including box bounds against `image`.
///
/// Violations are returned as data; the function is pure.
pub fn validate_trace(trace: &ReasoningTrace, image: &ImageRef) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_structure(trace, Some(image), true, &mut report);
    report
}

/// Validate a single cue; used for human submissions as well as traces.
pub fn validate_cue(
    cue: &VisualCue,
    image: Option<&ImageRef>,
    path: &str,
    report: &mut ValidationReport,
) {
    if cue.label.trim().is_empty() {
        report.push(
            ViolationCode::EmptyLabel,
            format!("{path}.label"),
            "cue label is empty",
        );
    }
    if let CuePayload::Boxes { boxes } = &cue.payload {
        if boxes.is_empty() {
            report.push(
                ViolationCode::EmptyBoxes,
                format!("{path}.boxes"),
                "boxes payload is empty",
            );
        }
        for (j, b) in boxes.iter().enumerate() {
            let bpath = format!("{path}.boxes[{j}]");
            if b.is_degenerate() {
                report.push(
                    ViolationCode::BboxDegenerate,
                    &bpath,
                    format!("{b} has no area"),
                );
            }
            if let Some(image) = image {
                if !b.fits(image) {
                    report.push(
                        ViolationCode::BboxOutOfRange,
                        &bpath,
                        format!("{b} exceeds {}x{}", image.width, image.height),
                    );
                }
            }
        }
    }
}

fn check_structure(
    trace: &ReasoningTrace,
    image: Option<&ImageRef>,
    check_raw: bool,
    report: &mut ValidationReport,
) {
    if trace.answer.trim().is_empty() {
        report.push(ViolationCode::EmptyAnswer, "answer", "answer is empty");
    }
    if check_raw && trace.raw_text.is_empty() {
        report.push(ViolationCode::EmptyRawText, "raw_text", "raw text is empty");
    }
    match trace.kind {
        TraceKind::Shortcut => {
            if !trace.understand.is_empty() || !trace.think.is_empty() {
                report.push(
                    ViolationCode::ShortcutHasReasoning,
                    "kind",
                    "shortcut trace carries understanding or thinking",
                );
            }
        }
        TraceKind::Unified => {
            if trace.understand.is_empty() {
                report.push(
                    ViolationCode::EmptyUnderstand,
                    "understand",
                    "no directives or cues",
                );
            }
            if trace.think.trim().is_empty() {
                report.push(ViolationCode::EmptyThink, "think", "think segment is empty");
            }
        }
    }

    for (i, d) in trace.understand.directives.iter().enumerate() {
        let path = format!("understand.directives[{i}]");
        if d.instruction_text.trim().is_empty() {
            report.push(
                ViolationCode::EmptyInstruction,
                format!("{path}.instruction"),
                "instruction is empty",
            );
        }
        if d.targets.is_empty() && !d.capability.allows_no_targets() {
            report.push(
                ViolationCode::DirectiveNoTargets,
                format!("{path}.targets"),
                format!("{} requires at least one target", d.capability),
            );
        }
        for (j, t) in d.targets.iter().enumerate() {
            if !trace.understand.cues.iter().any(|c| &c.label == t) {
                report.push(
                    ViolationCode::DirectiveTargetUncovered,
                    format!("{path}.targets[{j}]"),
                    format!("no cue labeled `{t}`"),
                );
            }
        }
    }
    for (i, c) in trace.understand.cues.iter().enumerate() {
        validate_cue(c, image, &format!("understand.cues[{i}]"), report);
    }

    if check_raw && !trace.raw_text.is_empty() && !trace.answer.is_empty() {
        check_order(trace, report);
    }
}

/// Understanding content must precede thinking, which must precede the answer.
fn check_order(trace: &ReasoningTrace, report: &mut ValidationReport) {
    let raw = trace.raw_text.as_str();
    let Some(answer_start) = raw.rfind(trace.answer.as_str()) else {
        report.push(
            ViolationCode::SegmentMissing,
            "answer",
            "answer not found in raw text",
        );
        return;
    };
    let mut think_start = answer_start;
    if !trace.think.is_empty() {
        match raw[..answer_start].rfind(trace.think.as_str()) {
            Some(p) => think_start = p,
            None => {
                let code = if raw.contains(trace.think.as_str()) {
                    ViolationCode::SegmentOrder
                } else {
                    ViolationCode::SegmentMissing
                };
                report.push(code, "think", "think must appear before the answer");
                return;
            }
        }
    }
    let understand_bound = &raw[..think_start];
    let pieces = trace
        .understand
        .directives
        .iter()
        .map(|d| ("understand.directives", d.instruction_text.as_str()))
        .chain(
            trace
                .understand
                .cues
                .iter()
                .map(|c| ("understand.cues", c.label.as_str())),
        );
    for (path, piece) in pieces {
        if piece.is_empty() {
            continue;
        }
        if !understand_bound.contains(piece) {
            let code = if raw.contains(piece) {
                ViolationCode::SegmentOrder
            } else {
                ViolationCode::SegmentMissing
            };
            report.push(
                code,
                path,
                format!("`{piece}` must appear before the think segment"),
            );
        }
    }
}
