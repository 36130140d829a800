//! Flat-text grammar and JSON schema for [`ReasoningTrace`].
//!
//! The rendered form, with the default configuration:
//!
//! ```text
//! UNDERSTAND:
//! Visual Grounding(red balloon, white balloon): Locate both balloons.
//! red balloon: [10, 120, 40, 160]
//! white balloon: [15, 20, 45, 60]
//! THINK:
//! The red balloon's center y is 140.0 and the white balloon's is 40.0 ...
//! ANSWER:
//! yes
//! ```
//!
//! Directive lines are `Capability(target, target): instruction`. Cue lines
//! are `label: payload` where the payload is one or more box literals, the
//! none token, `text "<json string>"` or `caption "<json string>"`.
//!
//! [`parse`] is strict and is the exact inverse of [`render`]. Model output
//! that must survive imperfect formatting goes through [`extract_boxes`] and
//! [`extract_answer`] instead.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{
    validate_content, BoundingBox, Capability, CuePayload, ReasoningTrace, TraceKind,
    UnderstandDirective, Understanding, VisualCue,
};

/// Characters that may not appear in cue labels or directive targets.
const LABEL_FORBIDDEN: &[char] = &[':', '(', ')', ',', ';', '\n', '\r', '"'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarConfig {
    pub understand_marker: String,
    pub think_marker: String,
    pub answer_marker: String,
    pub none_token: String,
    pub box_open: String,
    pub box_close: String,
    pub box_sep: String,
    /// Inputs longer than this many bytes are rejected by [`parse`].
    pub max_input_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            understand_marker: "UNDERSTAND:".into(),
            think_marker: "THINK:".into(),
            answer_marker: "ANSWER:".into(),
            none_token: "none".into(),
            box_open: "[".into(),
            box_close: "]".into(),
            box_sep: ", ".into(),
            max_input_len: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid grammar config: {0}")]
pub struct ConfigError(pub String);

impl GrammarConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let markers = self.markers();
        for (name, m) in markers {
            if m.is_empty() {
                return Err(ConfigError(format!("{name} marker is empty")));
            }
            if m.contains('\n') || m.contains('\r') {
                return Err(ConfigError(format!("{name} marker contains a line break")));
            }
        }
        for (i, (a_name, a)) in markers.iter().enumerate() {
            for (b_name, b) in markers.iter().skip(i + 1) {
                if a.contains(b.as_str()) || b.contains(a.as_str()) {
                    return Err(ConfigError(format!(
                        "{a_name} and {b_name} markers overlap"
                    )));
                }
            }
        }
        if self.none_token.is_empty() || self.none_token.contains('\n') {
            return Err(ConfigError(
                "none token must be a non-empty single line".into(),
            ));
        }
        if self.none_token.starts_with(self.box_open.as_str())
            || self.none_token.starts_with("text ")
            || self.none_token.starts_with("caption ")
        {
            return Err(ConfigError(
                "none token collides with another payload form".into(),
            ));
        }
        if self.box_open.is_empty() || self.box_close.is_empty() || self.box_sep.trim().is_empty() {
            return Err(ConfigError("box delimiters must be non-empty".into()));
        }
        if self.box_open == self.box_close {
            return Err(ConfigError("box_open and box_close must differ".into()));
        }
        Ok(())
    }

    fn markers(&self) -> [(&'static str, &String); 3] {
        [
            ("understand", &self.understand_marker),
            ("think", &self.think_marker),
            ("answer", &self.answer_marker),
        ]
    }

    fn sep_core(&self) -> &str {
        self.box_sep.trim()
    }

    /// Render one box literal.
    pub fn box_literal(&self, b: &BoundingBox) -> String {
        let sep = &self.box_sep;
        format!(
            "{}{}{sep}{}{sep}{}{sep}{}{}",
            self.box_open, b.x1, b.y1, b.x2, b.y2, self.box_close
        )
    }
}

/// Byte offsets `[start, end)` of each segment's content within the raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpans {
    pub understand_span: (usize, usize),
    pub think_span: (usize, usize),
    pub answer_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing {name} marker (expected after offset {expected_after_offset})")]
    MissingMarker {
        name: &'static str,
        expected_after_offset: usize,
    },
    #[error("{name} marker repeated at offset {offset}")]
    DuplicateMarker { name: &'static str, offset: usize },
    #[error("{name} marker out of order at offset {offset}")]
    MarkerOrder { name: &'static str, offset: usize },
    #[error("malformed box at offset {offset}: `{slice}` ({reason})")]
    MalformedBox {
        offset: usize,
        slice: String,
        reason: String,
    },
    #[error("malformed line at offset {offset}: `{slice}`")]
    MalformedLine { offset: usize, slice: String },
    #[error("{name} segment is empty")]
    EmptySegment { name: &'static str },
    #[error("input of {len} bytes exceeds limit of {limit}")]
    InputTooLarge { len: usize, limit: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ParseError {
    /// Stable short code, used in evaluation reports.
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::MissingMarker { .. } => "MISSING_MARKER",
            ParseError::DuplicateMarker { .. } => "DUPLICATE_MARKER",
            ParseError::MarkerOrder { .. } => "MARKER_ORDER",
            ParseError::MalformedBox { .. } => "MALFORMED_BOX",
            ParseError::MalformedLine { .. } => "MALFORMED_LINE",
            ParseError::EmptySegment { .. } => "EMPTY_SEGMENT",
            ParseError::InputTooLarge { .. } => "INPUT_TOO_LARGE",
            ParseError::Config(_) => "BAD_CONFIG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation at {path}: {reason}")]
pub struct SchemaViolation {
    pub path: String,
    pub reason: String,
}

// ---------------------------------------------------------------------------
// render

/// Render a trace to its flat text form. Deterministic.
pub fn render(trace: &ReasoningTrace, cfg: &GrammarConfig) -> Result<String, RenderError> {
    cfg.validate()?;
    let report = validate_content(trace);
    let mut problems: Vec<String> = report
        .violations
        .iter()
        .map(|v| format!("{} at {}", v.code, v.path))
        .collect();
    check_lexical(trace, cfg, &mut problems);
    if !problems.is_empty() {
        return Err(RenderError::InvalidTrace(problems.join("; ")));
    }
    Ok(render_unchecked(trace, cfg))
}

fn render_unchecked(trace: &ReasoningTrace, cfg: &GrammarConfig) -> String {
    let mut out = String::with_capacity(128 + trace.think.len() + trace.answer.len());
    out.push_str(&cfg.understand_marker);
    out.push('\n');
    for d in &trace.understand.directives {
        out.push_str(&directive_line(d));
        out.push('\n');
    }
    for c in &trace.understand.cues {
        out.push_str(&cue_line(c, cfg));
        out.push('\n');
    }
    out.push_str(&cfg.think_marker);
    out.push('\n');
    if !trace.think.is_empty() {
        out.push_str(&trace.think);
        out.push('\n');
    }
    out.push_str(&cfg.answer_marker);
    out.push('\n');
    out.push_str(&trace.answer);
    out
}

/// Render a trace and store the result in its `raw_text`.
pub fn render_into(
    mut trace: ReasoningTrace,
    cfg: &GrammarConfig,
) -> Result<ReasoningTrace, RenderError> {
    trace.raw_text = render(&trace, cfg)?;
    Ok(trace)
}

fn directive_line(d: &UnderstandDirective) -> String {
    format!(
        "{}({}): {}",
        d.capability.name(),
        d.targets.join(", "),
        d.instruction_text
    )
}

fn cue_line(c: &VisualCue, cfg: &GrammarConfig) -> String {
    let payload = match &c.payload {
        CuePayload::Boxes { boxes } => boxes
            .iter()
            .map(|b| cfg.box_literal(b))
            .collect::<Vec<_>>()
            .join(", "),
        CuePayload::Text { text } => format!("text {}", json_string(text)),
        CuePayload::Caption { text } => format!("caption {}", json_string(text)),
        CuePayload::None => cfg.none_token.clone(),
    };
    format!("{}: {payload}", c.label)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Grammar-level constraints beyond the trace invariants: labels must be
/// delimiter-free and no content may contain a segment marker.
/// Rewrite free text into a label that renders under `cfg`: delimiters and
/// markers become spaces, whitespace is collapsed. `None` if nothing is left.
pub fn sanitize_label(text: &str, cfg: &GrammarConfig) -> Option<String> {
    let mut s = text.replace(LABEL_FORBIDDEN, " ");
    for d in [&cfg.box_open, &cfg.box_close] {
        s = s.replace(d.as_str(), " ");
    }
    loop {
        let before = s.len();
        for (_, m) in cfg.markers() {
            s = s.replace(m.as_str(), " ");
        }
        if s.len() == before {
            break;
        }
    }
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    (!s.is_empty()).then_some(s)
}

/// No delimiter, box bracket or marker inside a label.
fn label_is_clean(label: &str, cfg: &GrammarConfig) -> bool {
    !label.contains(LABEL_FORBIDDEN)
        && !label.contains(cfg.box_open.as_str())
        && !label.contains(cfg.box_close.as_str())
        && !cfg
            .markers()
            .iter()
            .any(|(_, m)| label.contains(m.as_str()))
}

fn check_lexical(trace: &ReasoningTrace, cfg: &GrammarConfig, problems: &mut Vec<String>) {
    let has_marker = |s: &str| cfg.markers().iter().any(|(_, m)| s.contains(m.as_str()));
    let check_label = |path: String, label: &str, problems: &mut Vec<String>| {
        if label.is_empty() {
            problems.push(format!("empty label at {path}"));
        } else if label.trim() != label {
            problems.push(format!(
                "label `{label}` at {path} has surrounding whitespace"
            ));
        } else if !label_is_clean(label, cfg) {
            problems.push(format!("label `{label}` at {path} contains a delimiter"));
        }
    };
    for (i, d) in trace.understand.directives.iter().enumerate() {
        for (j, t) in d.targets.iter().enumerate() {
            check_label(
                format!("understand.directives[{i}].targets[{j}]"),
                t,
                problems,
            );
        }
        let text = &d.instruction_text;
        if text.contains(['\n', '\r']) || has_marker(text) {
            problems.push(format!(
                "instruction at understand.directives[{i}] spans lines or holds a marker"
            ));
        }
    }
    for (i, c) in trace.understand.cues.iter().enumerate() {
        check_label(format!("understand.cues[{i}].label"), &c.label, problems);
        if let CuePayload::Text { text } | CuePayload::Caption { text } = &c.payload {
            if has_marker(&json_string(text)) {
                problems.push(format!("text at understand.cues[{i}] holds a marker"));
            }
        }
    }
    if has_marker(&trace.think) {
        problems.push("think holds a marker".into());
    }
    if has_marker(&trace.answer) {
        problems.push("answer holds a marker".into());
    }
}

// ---------------------------------------------------------------------------
// parse

/// Strictly parse a rendered trace. Never panics.
pub fn parse(raw: &str, cfg: &GrammarConfig) -> Result<(ReasoningTrace, SegmentSpans), ParseError> {
    cfg.validate()?;
    if raw.len() > cfg.max_input_len {
        return Err(ParseError::InputTooLarge {
            len: raw.len(),
            limit: cfg.max_input_len,
        });
    }

    let mut positions = [0usize; 3];
    let mut after = 0usize;
    for (k, (name, marker)) in cfg.markers().iter().enumerate() {
        let mut hits = raw.match_indices(marker.as_str()).map(|(i, _)| i);
        let Some(first) = hits.next() else {
            return Err(ParseError::MissingMarker {
                name,
                expected_after_offset: after,
            });
        };
        if let Some(second) = hits.next() {
            return Err(ParseError::DuplicateMarker {
                name,
                offset: second,
            });
        }
        if k > 0 && first < positions[k - 1] {
            return Err(ParseError::MarkerOrder {
                name,
                offset: first,
            });
        }
        positions[k] = first;
        after = first + marker.len();
    }
    let [u_pos, t_pos, a_pos] = positions;

    let prefix = &raw[..u_pos];
    if !prefix.trim().is_empty() {
        return Err(ParseError::MalformedLine {
            offset: 0,
            slice: clip(prefix),
        });
    }

    let u_body = segment_body(raw, u_pos + cfg.understand_marker.len(), t_pos)?;
    let t_body = segment_body(raw, t_pos + cfg.think_marker.len(), a_pos)?;
    let a_start = a_pos + cfg.answer_marker.len();
    if !raw[a_start..].starts_with('\n') {
        return Err(ParseError::MalformedLine {
            offset: a_start,
            slice: clip(&raw[a_start..]),
        });
    }
    let a_body = (a_start + 1, raw.len());

    let understand = parse_understand(raw, u_body, cfg)?;
    let think = raw[t_body.0..t_body.1].to_string();
    let answer = raw[a_body.0..a_body.1].to_string();
    if answer.is_empty() {
        return Err(ParseError::EmptySegment { name: "answer" });
    }
    let kind = if understand.is_empty() && think.is_empty() {
        TraceKind::Shortcut
    } else if understand.is_empty() {
        return Err(ParseError::EmptySegment { name: "understand" });
    } else if think.is_empty() {
        return Err(ParseError::EmptySegment { name: "think" });
    } else {
        TraceKind::Unified
    };

    let trace = ReasoningTrace {
        kind,
        understand,
        think,
        answer,
        raw_text: raw.to_string(),
    };
    let spans = SegmentSpans {
        understand_span: u_body,
        think_span: t_body,
        answer_span: a_body,
    };
    Ok((trace, spans))
}

/// Content between a marker (ending at `start`) and the next marker at `end`:
/// a newline, then optionally content terminated by one newline.
fn segment_body(raw: &str, start: usize, end: usize) -> Result<(usize, usize), ParseError> {
    let body = &raw[start..end];
    let Some(rest) = body.strip_prefix('\n') else {
        return Err(ParseError::MalformedLine {
            offset: start,
            slice: clip(body),
        });
    };
    if rest.is_empty() {
        return Ok((end, end));
    }
    if !rest.ends_with('\n') {
        return Err(ParseError::MalformedLine {
            offset: start + 1,
            slice: clip(rest),
        });
    }
    Ok((start + 1, end - 1))
}

fn parse_understand(
    raw: &str,
    span: (usize, usize),
    cfg: &GrammarConfig,
) -> Result<Understanding, ParseError> {
    let mut out = Understanding::default();
    if span.0 == span.1 {
        return Ok(out);
    }
    let mut offset = span.0;
    for line in raw[span.0..span.1].split('\n') {
        if let Some(d) = parse_directive(line, offset, cfg)? {
            out.directives.push(d);
        } else {
            out.cues.push(parse_cue(line, offset, cfg)?);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

fn parse_directive(
    line: &str,
    offset: usize,
    cfg: &GrammarConfig,
) -> Result<Option<UnderstandDirective>, ParseError> {
    let Some(cap) = Capability::ALL.into_iter().find(|c| {
        line.strip_prefix(c.name())
            .is_some_and(|r| r.starts_with('('))
    }) else {
        return Ok(None);
    };
    let malformed = || ParseError::MalformedLine {
        offset,
        slice: clip(line),
    };
    let rest = &line[cap.name().len() + 1..];
    let close = rest.find(')').ok_or_else(malformed)?;
    let inner = &rest[..close];
    let instruction = rest[close + 1..].strip_prefix(": ").ok_or_else(malformed)?;
    let targets = if inner.trim().is_empty() {
        Vec::new()
    } else {
        let targets: Vec<String> = inner.split(',').map(|t| t.trim().to_string()).collect();
        if targets
            .iter()
            .any(|t| t.is_empty() || !label_is_clean(t, cfg))
        {
            return Err(malformed());
        }
        targets
    };
    Ok(Some(UnderstandDirective {
        capability: cap,
        targets,
        instruction_text: instruction.to_string(),
    }))
}

fn parse_cue(line: &str, offset: usize, cfg: &GrammarConfig) -> Result<VisualCue, ParseError> {
    let malformed = || ParseError::MalformedLine {
        offset,
        slice: clip(line),
    };
    let colon = line.find(':').ok_or_else(malformed)?;
    let label = &line[..colon];
    let payload = line[colon + 1..].strip_prefix(' ').ok_or_else(malformed)?;
    if label.is_empty() || label.trim() != label || !label_is_clean(label, cfg) {
        return Err(malformed());
    }
    let payload_offset = offset + colon + 2;
    let payload = if payload == cfg.none_token {
        CuePayload::None
    } else if let Some(s) = payload.strip_prefix("text ") {
        CuePayload::Text {
            text: serde_json::from_str(s).map_err(|_| malformed())?,
        }
    } else if let Some(s) = payload.strip_prefix("caption ") {
        CuePayload::Caption {
            text: serde_json::from_str(s).map_err(|_| malformed())?,
        }
    } else if payload.starts_with(cfg.box_open.as_str()) {
        CuePayload::Boxes {
            boxes: parse_box_list(payload, payload_offset, cfg)?,
        }
    } else {
        return Err(malformed());
    };
    Ok(VisualCue {
        label: label.to_string(),
        payload,
    })
}

/// `[..], [..], ...` with nothing else on the line.
fn parse_box_list(
    s: &str,
    offset: usize,
    cfg: &GrammarConfig,
) -> Result<Vec<BoundingBox>, ParseError> {
    let mut boxes = Vec::new();
    let mut pos = 0usize;
    loop {
        let rest = &s[pos..];
        let bad = |reason: &str| ParseError::MalformedBox {
            offset: offset + pos,
            slice: clip(rest),
            reason: reason.to_string(),
        };
        let inner_start = rest
            .strip_prefix(cfg.box_open.as_str())
            .ok_or_else(|| bad("expected box"))?;
        let close = inner_start
            .find(cfg.box_close.as_str())
            .ok_or_else(|| bad("unterminated box"))?;
        let literal_len = cfg.box_open.len() + close + cfg.box_close.len();
        let b = parse_box_inner(&inner_start[..close], cfg).map_err(|reason| {
            ParseError::MalformedBox {
                offset: offset + pos,
                slice: rest[..literal_len].to_string(),
                reason,
            }
        })?;
        boxes.push(b);
        pos += literal_len;
        if pos == s.len() {
            return Ok(boxes);
        }
        let tail = &s[pos..];
        let trimmed = tail.trim_start();
        let Some(after_comma) = trimmed.strip_prefix(',') else {
            return Err(ParseError::MalformedBox {
                offset: offset + pos,
                slice: clip(tail),
                reason: "unexpected text after box".into(),
            });
        };
        pos = s.len() - after_comma.trim_start().len();
    }
}

/// Parse the text between box delimiters into a valid box.
fn parse_box_inner(inner: &str, cfg: &GrammarConfig) -> Result<BoundingBox, String> {
    let parts: Vec<&str> = inner.split(cfg.sep_core()).map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 coordinates, found {}", parts.len()));
    }
    let mut v = [0i64; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || p.len() > 12 {
            return Err(format!("`{p}` is not a non-negative integer"));
        }
        *slot = p
            .parse()
            .map_err(|_| format!("`{p}` is not a non-negative integer"))?;
    }
    let b = BoundingBox::from(v);
    if b.x2 <= b.x1 {
        return Err("x2 <= x1".into());
    }
    if b.y2 <= b.y1 {
        return Err("y2 <= y1".into());
    }
    Ok(b)
}

fn clip(s: &str) -> String {
    const MAX: usize = 80;
    if s.len() <= MAX {
        return s.to_string();
    }
    let mut end = MAX;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}

// ---------------------------------------------------------------------------
// lenient extraction

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoxWarning {
    pub offset: usize,
    pub slice: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedBoxes {
    pub boxes: Vec<(String, BoundingBox)>,
    pub warnings: Vec<BoxWarning>,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "its", "their", "his", "her",
];
const CONNECTIVES: &[&str] = &["and", "or", "with", "at", "is", "are"];

/// Pull every well-formed labeled box out of free text, in order.
///
/// Malformed literals that look like boxes are skipped and reported as
/// warnings. A box's label is the phrase right before it; a box with no
/// phrase of its own inherits the previous box's label.
pub fn extract_boxes(segment: &str, cfg: &GrammarConfig) -> ExtractedBoxes {
    let mut out = ExtractedBoxes::default();
    let open = cfg.box_open.as_str();
    let close = cfg.box_close.as_str();
    if open.is_empty() || close.is_empty() {
        return out;
    }
    let mut boundary = 0usize;
    let mut last_label: Option<String> = None;
    let mut search = 0usize;
    while let Some(found) = segment[search..].find(open) {
        let p = search + found;
        let inner_start = p + open.len();
        let next = next_char_boundary(segment, p);
        let Some(close_rel) = segment[inner_start..].find(close) else {
            if looks_numeric(&segment[inner_start..]) {
                out.warnings.push(BoxWarning {
                    offset: p,
                    slice: clip(&segment[p..]),
                    reason: "unterminated box".into(),
                });
            }
            search = next;
            continue;
        };
        let inner = &segment[inner_start..inner_start + close_rel];
        let end = inner_start + close_rel + close.len();
        if !looks_numeric(inner) {
            search = next;
            continue;
        }
        match parse_box_inner(inner, cfg) {
            Ok(b) => {
                let label = derive_label(&segment[boundary..p]).or_else(|| last_label.clone());
                let label = label.unwrap_or_else(|| "object".to_string());
                out.boxes.push((label.clone(), b));
                last_label = Some(label);
                boundary = end;
                search = end;
            }
            Err(reason) => {
                out.warnings.push(BoxWarning {
                    offset: p,
                    slice: segment[p..end].to_string(),
                    reason,
                });
                boundary = end;
                search = next;
            }
        }
    }
    out
}

fn next_char_boundary(s: &str, p: usize) -> usize {
    let mut q = p + 1;
    while q < s.len() && !s.is_char_boundary(q) {
        q += 1;
    }
    q
}

/// A bracketed span that is clearly an attempt at a coordinate list.
fn looks_numeric(inner: &str) -> bool {
    let mut digit = false;
    for c in inner.chars() {
        match c {
            '0'..='9' => digit = true,
            ',' | ' ' | '\t' | '-' | '+' | '.' => {}
            _ => return false,
        }
    }
    digit
}

fn derive_label(text: &str) -> Option<String> {
    let cut = text
        .rfind(['\n', ',', ';', '.', '!', '?', '(', ')'])
        .map(|i| i + 1)
        .unwrap_or(0);
    let mut phrase = text[cut..].trim();
    phrase = phrase.trim_end_matches(':').trim_end();
    if let Some(i) = phrase.rfind(':') {
        phrase = phrase[i + 1..].trim();
    }
    let words: Vec<&str> = phrase
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c == '"' || c == '\'' || c == '[' || c == ']' || c == '*')
        })
        .filter(|w| !w.is_empty())
        .collect();
    let start = words
        .iter()
        .rposition(|w| DETERMINERS.contains(&w.to_lowercase().as_str()))
        .map(|i| i + 1)
        .unwrap_or(0);
    let mut words = &words[start..];
    while let Some(first) = words.first() {
        if CONNECTIVES.contains(&first.to_lowercase().as_str()) {
            words = &words[1..];
        } else {
            break;
        }
    }
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// Best-effort answer from free model output: the text after the answer
/// marker when present (last occurrence), else the last non-empty line.
pub fn extract_answer(raw: &str, cfg: &GrammarConfig) -> Option<String> {
    let tail = match raw.rfind(cfg.answer_marker.as_str()) {
        Some(i) => &raw[i + cfg.answer_marker.len()..],
        None => raw.lines().rev().find(|l| !l.trim().is_empty())?,
    };
    let answer = tail.trim();
    if answer.is_empty() {
        None
    } else {
        Some(answer.to_string())
    }
}

// ---------------------------------------------------------------------------
// JSON

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceDoc {
    kind: TraceKind,
    understand: Understanding,
    think: String,
    answer: String,
    raw_text: String,
}

impl From<&ReasoningTrace> for TraceDoc {
    fn from(t: &ReasoningTrace) -> Self {
        Self {
            kind: t.kind,
            understand: t.understand.clone(),
            think: t.think.clone(),
            answer: t.answer.clone(),
            raw_text: t.raw_text.clone(),
        }
    }
}

impl From<TraceDoc> for ReasoningTrace {
    fn from(d: TraceDoc) -> Self {
        Self {
            kind: d.kind,
            understand: d.understand,
            think: d.think,
            answer: d.answer,
            raw_text: d.raw_text,
        }
    }
}

impl Serialize for ReasoningTrace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TraceDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReasoningTrace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        TraceDoc::deserialize(d).map(Into::into)
    }
}

/// Canonical compact JSON: keys `kind`, `understand{directives,cues}`,
/// `think`, `answer`, `raw_text`.
pub fn to_json(trace: &ReasoningTrace) -> String {
    serde_json::to_string(trace).expect("trace serialization is infallible")
}

pub fn from_json(s: &str) -> Result<ReasoningTrace, SchemaViolation> {
    from_json_str(s)
}

/// Deserialize `s` as `T`, reporting failures as a JSON-pointer path plus reason.
pub fn from_json_str<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, SchemaViolation> {
    let mut de = serde_json::Deserializer::from_str(s);
    let value = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| schema_violation(e.path(), e.inner()))?;
    de.end().map_err(|e| SchemaViolation {
        path: "/".into(),
        reason: e.to_string(),
    })?;
    Ok(value)
}

/// Deserialize from an already-parsed value, with the same error mapping.
pub fn from_json_value<T: serde::de::DeserializeOwned>(
    v: serde_json::Value,
) -> Result<T, SchemaViolation> {
    serde_path_to_error::deserialize(v).map_err(|e| schema_violation(e.path(), e.inner()))
}

pub(crate) fn schema_violation(
    path: &serde_path_to_error::Path,
    err: &impl fmt::Display,
) -> SchemaViolation {
    let mut pointer = String::new();
    for seg in path.iter() {
        use serde_path_to_error::Segment;
        match seg {
            Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                pointer.push('/');
                pointer.push_str(key);
            }
            Segment::Unknown => pointer.push_str("/?"),
        }
    }
    let msg = err.to_string();
    let mut reason = msg.clone();
    if let Some(field) = backticked(&msg, "missing field `") {
        pointer.push('/');
        pointer.push_str(field);
        reason = "required".into();
    } else if let Some(field) = backticked(&msg, "unknown field `") {
        if !pointer.ends_with(&format!("/{field}")) {
            pointer.push('/');
            pointer.push_str(field);
        }
        reason = "unknown key".into();
    }
    if let Some(i) = reason.find(" at line ") {
        reason.truncate(i);
    }
    if pointer.is_empty() {
        pointer.push('/');
    }
    SchemaViolation {
        path: pointer,
        reason,
    }
}

fn backticked<'a>(msg: &'a str, prefix: &str) -> Option<&'a str> {
    let rest = msg.strip_prefix(prefix)?;
    rest.find('`').map(|i| &rest[..i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GrammarConfig {
        GrammarConfig::default()
    }

    #[test]
    fn sanitized_labels_render() {
        let c = cfg();
        assert_eq!(
            sanitize_label(" red (big) balloon: [x] ", &c).as_deref(),
            Some("red big balloon x")
        );
        assert_eq!(sanitize_label(" ;: ", &c), None);
        let tagged = GrammarConfig {
            think_marker: "<think>".into(),
            ..cfg()
        };
        assert_eq!(
            sanitize_label("<thi<think>nk> cat", &tagged).as_deref(),
            Some("<thi nk> cat")
        );
    }

    fn sample() -> ReasoningTrace {
        let t = ReasoningTrace {
            kind: TraceKind::Unified,
            understand: Understanding {
                directives: vec![UnderstandDirective {
                    capability: Capability::VisualGrounding,
                    targets: vec!["burger".into(), "meat".into()],
                    instruction_text: "Identify the presence of burger and meat.".into(),
                }],
                cues: vec![
                    VisualCue::boxes("burger", vec![BoundingBox::new(120, 40, 380, 300)]),
                    VisualCue::none("meat"),
                ],
            },
            think: "There is a burger but no meat.".into(),
            answer: "vegetarian".into(),
            raw_text: String::new(),
        };
        render_into(t, &cfg()).unwrap()
    }

    #[test]
    fn renders_box_and_none_cues() {
        let raw = sample().raw_text;
        assert!(raw.contains("burger: [120, 40, 380, 300]"), "{raw}");
        assert!(raw.contains("meat: none"), "{raw}");
        for m in ["UNDERSTAND:", "THINK:", "ANSWER:"] {
            assert_eq!(raw.matches(m).count(), 1);
        }
    }

    #[test]
    fn parse_inverts_render() {
        let t = sample();
        let (back, spans) = parse(&t.raw_text, &cfg()).unwrap();
        assert_eq!(back, t);
        assert!(spans.understand_span.1 < spans.think_span.0);
        assert!(spans.think_span.1 < spans.answer_span.0);
        assert_eq!(
            &t.raw_text[spans.answer_span.0..spans.answer_span.1],
            "vegetarian"
        );
    }

    #[test]
    fn shortcut_round_trip() {
        let t = render_into(ReasoningTrace::shortcut("yes"), &cfg()).unwrap();
        assert_eq!(t.raw_text, "UNDERSTAND:\nTHINK:\nANSWER:\nyes");
        assert_eq!(parse(&t.raw_text, &cfg()).unwrap().0, t);
    }

    #[test]
    fn text_and_caption_payloads_round_trip() {
        let mut t = sample();
        t.understand
            .cues
            .push(VisualCue::text("sign", "STOP \"now\"\nplease"));
        t.understand
            .cues
            .push(VisualCue::caption("caption", "A burger on a plate."));
        let t = render_into(t, &cfg()).unwrap();
        assert_eq!(parse(&t.raw_text, &cfg()).unwrap().0, t);
    }

    #[test]
    fn missing_answer_marker() {
        let raw = "UNDERSTAND:\nx: none\nTHINK:\nhmm\n";
        assert!(matches!(
            parse(raw, &cfg()),
            Err(ParseError::MissingMarker { name: "answer", .. })
        ));
    }

    #[test]
    fn inverted_box_is_malformed() {
        let raw = "UNDERSTAND:\nballoon: [10, 20, 5, 30]\nTHINK:\nhmm\nANSWER:\nyes";
        match parse(raw, &cfg()) {
            Err(ParseError::MalformedBox { offset, slice, .. }) => {
                assert_eq!(offset, raw.find('[').unwrap());
                assert_eq!(slice, "[10, 20, 5, 30]");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn delimiters_in_labels_are_rejected() {
        for raw in [
            "UNDERSTAND:\nred (big) cup: none\nTHINK:\nx\nANSWER:\ny",
            "UNDERSTAND:\ncup; plate: none\nTHINK:\nx\nANSWER:\ny",
            "UNDERSTAND:\nVisual Grounding(cup [1]): Locate.\nTHINK:\nx\nANSWER:\ny",
            "UNDERSTAND:\nVisual Grounding(a \"cup\"): Locate.\nTHINK:\nx\nANSWER:\ny",
        ] {
            assert!(
                matches!(parse(raw, &cfg()), Err(ParseError::MalformedLine { .. })),
                "{raw:?}"
            );
        }
    }

    #[test]
    fn duplicate_marker_rejected() {
        let raw = "UNDERSTAND:\nx: none\nTHINK:\nTHINK:\nANSWER:\nyes";
        assert!(matches!(
            parse(raw, &cfg()),
            Err(ParseError::DuplicateMarker { name: "think", .. })
        ));
    }

    #[test]
    fn boxes_without_spaces_are_tolerated() {
        let raw = "UNDERSTAND:\ncup: [1,2,3,4],[5,6,7,8]\nTHINK:\nok\nANSWER:\n2";
        let (t, _) = parse(raw, &cfg()).unwrap();
        assert_eq!(
            t.understand.cues[0].payload,
            CuePayload::Boxes {
                boxes: vec![BoundingBox::new(1, 2, 3, 4), BoundingBox::new(5, 6, 7, 8)]
            }
        );
    }

    #[test]
    fn render_rejects_marker_in_content() {
        let mut t = sample();
        t.think = "I will say ANSWER: now".into();
        assert!(matches!(
            render(&t, &cfg()),
            Err(RenderError::InvalidTrace(_))
        ));
        let mut t = sample();
        t.understand.cues[0].label = "bur:ger".into();
        t.understand.directives[0].targets[0] = "bur:ger".into();
        assert!(render(&t, &cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.think_marker = "UNDERSTAND:".into();
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.answer_marker = "ANSWER".into();
        c.think_marker = "ANSWER: THINK".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn extract_two_labeled_boxes() {
        let got = extract_boxes(
            "red balloon: [10, 5, 40, 60], white balloon: [15, 70, 45, 130]",
            &cfg(),
        );
        assert_eq!(
            got.boxes,
            vec![
                ("red balloon".to_string(), BoundingBox::new(10, 5, 40, 60)),
                (
                    "white balloon".to_string(),
                    BoundingBox::new(15, 70, 45, 130)
                ),
            ]
        );
        assert!(got.warnings.is_empty());
        assert_eq!(extract_boxes("", &cfg()), ExtractedBoxes::default());
    }

    #[test]
    fn extract_grounded_caption_phrase() {
        let got = extract_boxes("a dog [4, 4, 40, 40] sits", &cfg());
        assert_eq!(
            got.boxes,
            vec![("dog".to_string(), BoundingBox::new(4, 4, 40, 40))]
        );
        let got = extract_boxes("Two cups [1, 1, 5, 5] and [6, 6, 9, 9].", &cfg());
        assert_eq!(got.boxes[1].0, "Two cups");
    }

    #[test]
    fn extract_skips_malformed_and_non_numeric() {
        let got = extract_boxes("like [TASKs], cat: [1, 2, 3], dog: [5, 5, 9, 9]", &cfg());
        assert_eq!(
            got.boxes,
            vec![("dog".to_string(), BoundingBox::new(5, 5, 9, 9))]
        );
        assert_eq!(got.warnings.len(), 1);
        assert_eq!(got.warnings[0].slice, "[1, 2, 3]");
    }

    #[test]
    fn extract_answer_lenient() {
        assert_eq!(
            extract_answer("blah\nANSWER: Yes.\n", &cfg()).as_deref(),
            Some("Yes.")
        );
        assert_eq!(
            extract_answer("just two\n\n", &cfg()).as_deref(),
            Some("just two")
        );
        assert_eq!(extract_answer("ANSWER:\n  ", &cfg()), None);
    }

    #[test]
    fn json_round_trip_and_schema() {
        let t = sample();
        let j = to_json(&t);
        assert!(j.starts_with("{\"kind\":\"unified\",\"understand\":{\"directives\":"));
        assert_eq!(from_json(&j).unwrap(), t);

        let mut v: serde_json::Value = serde_json::from_str(&j).unwrap();
        v.as_object_mut().unwrap().remove("answer");
        let err = from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.path, "/answer");
        assert_eq!(err.reason, "required");

        let mut v: serde_json::Value = serde_json::from_str(&j).unwrap();
        v["extra"] = serde_json::json!(1);
        let err = from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.path, "/extra");
        assert_eq!(err.reason, "unknown key");

        let mut v: serde_json::Value = serde_json::from_str(&j).unwrap();
        v["understand"]["cues"][0]["payload"]["bogus"] = serde_json::json!(1);
        assert!(from_json(&v.to_string()).is_err());
    }

    #[test]
    fn shortcut_json_has_empty_arrays() {
        let t = render_into(ReasoningTrace::shortcut("no"), &cfg()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&t)).unwrap();
        assert_eq!(v["kind"], "shortcut");
        assert_eq!(v["understand"]["directives"], serde_json::json!([]));
        assert_eq!(v["understand"]["cues"], serde_json::json!([]));
        assert_eq!(v["think"], "");
    }

    mod props {
        use super::*;
        use crate::synth::random_trace;
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn render_parse_identity(seed in any::<u64>()) {
                let t = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &cfg());
                let (back, _) = parse(&t.raw_text, &cfg()).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(render(&back, &cfg()).unwrap(), t.raw_text);
            }

            #[test]
            fn parse_is_total(s in r#"(UNDERSTAND:\n|THINK:\n|ANSWER:\n|[a-z :,()\[\]0-9\n"])*"#) {
                let _ = parse(&s, &cfg());
                let _ = extract_boxes(&s, &cfg());
                let _ = extract_answer(&s, &cfg());
            }

            #[test]
            fn json_round_trip(seed in any::<u64>()) {
                let t = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &cfg());
                prop_assert_eq!(from_json(&to_json(&t)).unwrap(), t);
            }
        }
    }
}
