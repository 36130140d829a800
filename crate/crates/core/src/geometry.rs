//! Deterministic geometric reasoning over labeled boxes.
//!
//! Serves as the gold "think" step: spatial relations from box centers,
//! counting and existence by label/attribute matching, and synthesis of
//! complete understand-think-answer traces for spatial, count and existence
//! questions.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalCase, QuestionType};
use crate::grammar::{render_into, GrammarConfig, RenderError};
use crate::trace::{
    BoundingBox, Capability, ImageRef, ReasoningTrace, TraceKind, UnderstandDirective,
    Understanding, VisualCue,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub label: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl SceneObject {
    pub fn new(label: &str, attributes: &[&str], bbox: BoundingBox) -> Self {
        Self {
            label: normalize(label),
            attributes: attributes.iter().map(|a| normalize(a)).collect(),
            bbox,
        }
    }

    fn tokens(&self) -> impl Iterator<Item = &str> {
        self.label
            .split_whitespace()
            .chain(self.attributes.iter().flat_map(|a| a.split_whitespace()))
    }

    /// Every query token appears in the label or the attributes.
    pub fn matches_tokens(&self, query_tokens: &[&str]) -> bool {
        query_tokens.iter().all(|q| self.tokens().any(|t| t == *q))
    }
}

/// Gold labeled boxes for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraph {
    pub image: ImageRef,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("boxes belong to different images (`{0}` vs `{1}`)")]
    DifferentImages(String, String),
    #[error("question type `{0}` is not supported by the geometric reasoner")]
    UnsupportedQuestionType(QuestionType),
    #[error("question `{0}` does not match a supported form")]
    UnrecognizedQuestion(String),
    #[error("question form is {found} but the case is tagged {tagged}")]
    QuestionTypeMismatch {
        tagged: QuestionType,
        found: QuestionType,
    },
    #[error("`{query}` matches {matches} objects")]
    AmbiguousEntity { query: String, matches: usize },
    #[error("scene object {index} has box {bbox} outside the {width}x{height} image")]
    InvalidScene {
        index: usize,
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
}

impl SceneGraph {
    pub fn new(image: ImageRef, objects: Vec<SceneObject>) -> Self {
        Self { image, objects }
    }

    /// All boxes must be valid for the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (index, o) in self.objects.iter().enumerate() {
            if o.bbox.is_degenerate() || !o.bbox.fits(&self.image) {
                return Err(GeometryError::InvalidScene {
                    index,
                    bbox: o.bbox,
                    width: self.image.width,
                    height: self.image.height,
                });
            }
        }
        Ok(())
    }

    /// Indices of objects matching `query`, applying the plural rule.
    pub fn resolve(&self, query: &str) -> Vec<usize> {
        let q = normalize(query);
        let found = self.match_indices(&q);
        if !found.is_empty() {
            return found;
        }
        match q.strip_suffix('s') {
            Some(singular) if !singular.is_empty() && !singular.ends_with(' ') => {
                self.match_indices(singular)
            }
            _ => found,
        }
    }

    fn match_indices(&self, q: &str) -> Vec<usize> {
        let tokens: Vec<&str> = q.split_whitespace().collect();
        if tokens.is_empty() {
            return Vec::new();
        }
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.matches_tokens(&tokens))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Lowercase and collapse whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Inside,
    Contains,
    Overlapping,
    NextTo,
    Indeterminate,
}

impl Relation {
    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Inside => Relation::Contains,
            Relation::Contains => Relation::Inside,
            other => other,
        }
    }

    /// Phrase used in rendered questions and explanations.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Inside => "inside",
            Relation::Contains => "containing",
            Relation::Overlapping => "overlapping",
            Relation::NextTo => "next to",
            Relation::Indeterminate => "indeterminate with respect to",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

pub type RelationSet = BTreeSet<Relation>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationParams {
    /// Tie band on center comparisons, in pixels.
    pub eps: f64,
    /// NextTo holds when the center distance is at most this factor times
    /// the mean of the two box diagonals.
    pub next_to_factor: f64,
}

impl Default for RelationParams {
    fn default() -> Self {
        Self {
            eps: 2.0,
            next_to_factor: 1.5,
        }
    }
}

/// Spatial relations of `a` with respect to `b`, assuming a common image.
pub fn relation(a: &BoundingBox, b: &BoundingBox, params: &RelationParams) -> RelationSet {
    let mut out = RelationSet::new();
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let dx = bx - ax;
    let dy = by - ay;
    if dx > params.eps {
        out.insert(Relation::LeftOf);
    }
    if -dx > params.eps {
        out.insert(Relation::RightOf);
    }
    if dy > params.eps {
        out.insert(Relation::Above);
    }
    if -dy > params.eps {
        out.insert(Relation::Below);
    }
    if out.is_empty() {
        out.insert(Relation::Indeterminate);
    }

    let a_in_b = a.within(b);
    let b_in_a = b.within(a);
    if a_in_b && a != b {
        out.insert(Relation::Inside);
    }
    if b_in_a && a != b {
        out.insert(Relation::Contains);
    }
    let inter = a.intersection_area(b);
    if inter > 0 && !a_in_b && !b_in_a {
        out.insert(Relation::Overlapping);
    }
    let mean_diag = (a.diagonal() + b.diagonal()) / 2.0;
    if inter == 0 && dx.hypot(dy) <= params.next_to_factor * mean_diag {
        out.insert(Relation::NextTo);
    }
    out
}

/// A box tagged with the image it belongs to.
#[derive(Debug, Clone, Copy)]
pub struct TaggedBox<'a> {
    pub image_id: &'a str,
    pub bbox: BoundingBox,
}

/// [`relation`] with an image-identity check.
pub fn relation_tagged(
    a: TaggedBox<'_>,
    b: TaggedBox<'_>,
    params: &RelationParams,
) -> Result<RelationSet, GeometryError> {
    if a.image_id != b.image_id {
        return Err(GeometryError::DifferentImages(
            a.image_id.into(),
            b.image_id.into(),
        ));
    }
    Ok(relation(&a.bbox, &b.bbox, params))
}

/// Number of objects matching `query` (label or label+attribute tokens).
pub fn count(scene: &SceneGraph, query: &str) -> usize {
    scene.resolve(query).len()
}

/// Count over gathered cues: each box of a cue whose label matches counts once.
pub fn count_cues(cues: &[VisualCue], query: &str) -> usize {
    let objects = cues
        .iter()
        .flat_map(|c| match &c.payload {
            crate::trace::CuePayload::Boxes { boxes } => boxes
                .iter()
                .map(|b| SceneObject::new(&c.label, &[], *b))
                .collect(),
            _ => Vec::new(),
        })
        .collect();
    let scene = SceneGraph::new(ImageRef::new("", 0, 0, ""), objects);
    count(&scene, query)
}

pub fn exists(scene: &SceneGraph, query: &str) -> bool {
    count(scene, query) >= 1
}

/// Parsed form of a supported question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuestionForm {
    Spatial {
        subject: String,
        relation: Relation,
        object: String,
    },
    Count {
        entity: String,
    },
    Existence {
        entity: String,
    },
}

/// Relation phrases accepted in "Is the A <phrase> the B?" questions.
const RELATION_PHRASES: &[(&str, Relation)] = &[
    ("to the left of", Relation::LeftOf),
    ("left of", Relation::LeftOf),
    ("to the right of", Relation::RightOf),
    ("right of", Relation::RightOf),
    ("above", Relation::Above),
    ("below", Relation::Below),
    ("under", Relation::Below),
    ("beneath", Relation::Below),
    ("inside of", Relation::Inside),
    ("inside", Relation::Inside),
    ("within", Relation::Inside),
    ("next to", Relation::NextTo),
    ("beside", Relation::NextTo),
    ("overlapping with", Relation::Overlapping),
    ("overlapping", Relation::Overlapping),
];

impl QuestionForm {
    pub fn question_type(&self) -> QuestionType {
        match self {
            QuestionForm::Spatial { .. } => QuestionType::Spatial,
            QuestionForm::Count { .. } => QuestionType::Count,
            QuestionForm::Existence { .. } => QuestionType::Existence,
        }
    }

    /// Recognize one of the supported question templates.
    pub fn parse(question: &str) -> Option<QuestionForm> {
        let q = normalize(question);
        let q = q.trim_end_matches(['?', '.', '!']).trim_end();

        if let Some(rest) = q.strip_prefix("does the ") {
            let (subject, object) = rest.split_once(" contain the ")?;
            return spatial(subject, Relation::Contains, object);
        }
        if let Some(rest) = q.strip_prefix("is the ") {
            let mut best: Option<(usize, usize, Relation)> = None;
            for (phrase, rel) in RELATION_PHRASES {
                let needle = format!(" {phrase} the ");
                if let Some(pos) = rest.find(&needle) {
                    let better = match best {
                        None => true,
                        Some((bp, blen, _)) => pos < bp || (pos == bp && needle.len() > blen),
                    };
                    if better {
                        best = Some((pos, needle.len(), *rel));
                    }
                }
            }
            let (pos, len, rel) = best?;
            return spatial(&rest[..pos], rel, &rest[pos + len..]);
        }
        if let Some(rest) = q.strip_prefix("how many ") {
            for suffix in [
                " are there in the image",
                " are there",
                " are in the image",
                " are visible",
                " can you see",
            ] {
                if let Some(entity) = rest.strip_suffix(suffix) {
                    return entity_form(entity, |entity| QuestionForm::Count { entity });
                }
            }
            return None;
        }
        for prefix in [
            "is there an ",
            "is there a ",
            "is there any ",
            "are there any ",
            "are there ",
        ] {
            if let Some(rest) = q.strip_prefix(prefix) {
                let entity = ["in the image", "in this image", "in the picture"]
                    .iter()
                    .find_map(|s| rest.strip_suffix(s))
                    .unwrap_or(rest);
                return entity_form(entity, |entity| QuestionForm::Existence { entity });
            }
        }
        None
    }

    /// Canonical question text for this form.
    pub fn question_text(&self) -> String {
        match self {
            QuestionForm::Spatial {
                subject,
                relation: Relation::Contains,
                object,
            } => format!("Does the {subject} contain the {object}?"),
            QuestionForm::Spatial {
                subject,
                relation,
                object,
            } => format!("Is the {subject} {} the {object}?", relation.phrase()),
            QuestionForm::Count { entity } => format!("How many {entity} are there?"),
            QuestionForm::Existence { entity } => {
                let article = if entity.starts_with(['a', 'e', 'i', 'o', 'u']) {
                    "an"
                } else {
                    "a"
                };
                format!("Is there {article} {entity} in the image?")
            }
        }
    }
}

fn spatial(subject: &str, relation: Relation, object: &str) -> Option<QuestionForm> {
    let subject = subject.trim();
    let object = object.trim();
    if subject.is_empty() || object.is_empty() {
        return None;
    }
    Some(QuestionForm::Spatial {
        subject: subject.to_string(),
        relation,
        object: object.to_string(),
    })
}

fn entity_form(entity: &str, build: impl FnOnce(String) -> QuestionForm) -> Option<QuestionForm> {
    let entity = entity.trim();
    (!entity.is_empty()).then(|| build(entity.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct ReasonerOptions {
    pub relation: RelationParams,
    /// Error on spatial entities matching several objects instead of
    /// picking the largest one.
    pub strict: bool,
    pub grammar: GrammarConfig,
}

/// Result of reasoning over a scene: the pieces of a unified trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reasoning {
    pub directives: Vec<UnderstandDirective>,
    pub cues: Vec<VisualCue>,
    pub think: String,
    pub answer: String,
}

impl Reasoning {
    pub fn into_trace(self, grammar: &GrammarConfig) -> Result<ReasoningTrace, RenderError> {
        render_into(
            ReasoningTrace {
                kind: TraceKind::Unified,
                understand: Understanding {
                    directives: self.directives,
                    cues: self.cues,
                },
                think: self.think,
                answer: self.answer,
                raw_text: String::new(),
            },
            grammar,
        )
    }
}

/// Answer an evaluation case from its scene and synthesize the trace.
pub fn answer(
    case: &EvalCase,
    scene: &SceneGraph,
    opts: &ReasonerOptions,
) -> Result<(String, ReasoningTrace), GeometryError> {
    if case.question_type == QuestionType::Attribute {
        return Err(GeometryError::UnsupportedQuestionType(
            QuestionType::Attribute,
        ));
    }
    let form = QuestionForm::parse(&case.question)
        .ok_or_else(|| GeometryError::UnrecognizedQuestion(case.question.clone()))?;
    if form.question_type() != case.question_type {
        return Err(GeometryError::QuestionTypeMismatch {
            tagged: case.question_type,
            found: form.question_type(),
        });
    }
    let reasoning = reason(&form, scene, opts)?;
    let answer = reasoning.answer.clone();
    Ok((answer, reasoning.into_trace(&opts.grammar)?))
}

/// Apply the reasoner to an already-parsed question.
pub fn reason(
    form: &QuestionForm,
    scene: &SceneGraph,
    opts: &ReasonerOptions,
) -> Result<Reasoning, GeometryError> {
    match form {
        QuestionForm::Spatial {
            subject,
            relation: rel,
            object,
        } => reason_spatial(scene, &normalize(subject), *rel, &normalize(object), opts),
        QuestionForm::Count { entity } => Ok(reason_count(scene, &normalize(entity))),
        QuestionForm::Existence { entity } => Ok(reason_exists(scene, &normalize(entity))),
    }
}

fn pick(
    scene: &SceneGraph,
    query: &str,
    strict: bool,
) -> Result<Option<BoundingBox>, GeometryError> {
    let hits = scene.resolve(query);
    if hits.len() > 1 && strict {
        return Err(GeometryError::AmbiguousEntity {
            query: query.to_string(),
            matches: hits.len(),
        });
    }
    // Largest area wins; the first in scene order on ties.
    let mut best: Option<BoundingBox> = None;
    for i in hits {
        let b = scene.objects[i].bbox;
        if best.is_none_or(|cur| b.area() > cur.area()) {
            best = Some(b);
        }
    }
    Ok(best)
}

fn cue_for(label: &str, found: Option<BoundingBox>) -> VisualCue {
    match found {
        Some(b) => VisualCue::boxes(label, vec![b]),
        None => VisualCue::none(label),
    }
}

fn describe(label: &str, b: &BoundingBox) -> String {
    let (cx, cy) = b.center();
    format!("The {label} is at {b} with center ({cx:.1}, {cy:.1}).")
}

fn reason_spatial(
    scene: &SceneGraph,
    subject: &str,
    rel: Relation,
    object: &str,
    opts: &ReasonerOptions,
) -> Result<Reasoning, GeometryError> {
    let a = pick(scene, subject, opts.strict)?;
    let b = pick(scene, object, opts.strict)?;

    let mut targets = vec![subject.to_string()];
    let mut cues = vec![cue_for(subject, a)];
    if object != subject {
        targets.push(object.to_string());
        cues.push(cue_for(object, b));
    }
    let instruction = if object != subject {
        format!("Locate the {subject} and the {object}.")
    } else {
        format!("Locate the {subject}.")
    };
    let directives = vec![UnderstandDirective {
        capability: Capability::VisualGrounding,
        targets,
        instruction_text: instruction,
    }];

    let (think, answer) = match (a, b) {
        (Some(a), Some(b)) => {
            let holds = relation(&a, &b, &opts.relation).contains(&rel);
            let verdict = if holds { "is" } else { "is not" };
            let (ax, ay) = a.center();
            let (bx, by) = b.center();
            let comparison = match rel {
                Relation::LeftOf | Relation::RightOf => {
                    format!("Comparing their x-axis coordinates, {ax:.1} versus {bx:.1}")
                }
                Relation::Above | Relation::Below => {
                    format!("Comparing their y-axis coordinates, {ay:.1} versus {by:.1}")
                }
                Relation::Inside | Relation::Contains | Relation::Overlapping => {
                    format!(
                        "Their boxes share {} square pixels",
                        a.intersection_area(&b)
                    )
                }
                Relation::NextTo | Relation::Indeterminate => {
                    let dist = (bx - ax).hypot(by - ay);
                    format!(
                        "Their centers are {dist:.1} pixels apart and their boxes share {} square pixels",
                        a.intersection_area(&b)
                    )
                }
            };
            let think = format!(
                "{} {} {comparison}, so the {subject} {verdict} {} the {object}.",
                describe(subject, &a),
                describe(object, &b),
                rel.phrase()
            );
            (think, yes_no(holds))
        }
        (a, b) => {
            let missing: Vec<&str> = [(subject, a), (object, b)]
                .into_iter()
                .filter(|(_, f)| f.is_none())
                .map(|(l, _)| l)
                .collect();
            let think = format!(
                "No {} was found in the image, so the {subject} cannot be {} the {object}.",
                missing.join(" or "),
                rel.phrase()
            );
            (think, yes_no(false))
        }
    };
    Ok(Reasoning {
        directives,
        cues,
        think,
        answer,
    })
}

fn reason_count(scene: &SceneGraph, entity: &str) -> Reasoning {
    let hits = scene.resolve(entity);
    let boxes: Vec<BoundingBox> = hits.iter().map(|&i| scene.objects[i].bbox).collect();
    let think = if boxes.is_empty() {
        format!("No {entity} was found in the image, so the count is 0.")
    } else {
        let listed: Vec<String> = boxes.iter().map(ToString::to_string).collect();
        format!(
            "Found {} instance(s) of {entity} at {}, so the count is {}.",
            boxes.len(),
            listed.join(", "),
            boxes.len()
        )
    };
    let cue = if boxes.is_empty() {
        VisualCue::none(entity)
    } else {
        VisualCue::boxes(entity, boxes.clone())
    };
    Reasoning {
        directives: vec![UnderstandDirective {
            capability: Capability::VisualGrounding,
            targets: vec![entity.to_string()],
            instruction_text: format!("Locate every {entity}."),
        }],
        cues: vec![cue],
        think,
        answer: boxes.len().to_string(),
    }
}

fn reason_exists(scene: &SceneGraph, entity: &str) -> Reasoning {
    let hits = scene.resolve(entity);
    let boxes: Vec<BoundingBox> = hits.iter().map(|&i| scene.objects[i].bbox).collect();
    let (think, cue) = if let Some(first) = boxes.first() {
        (
            format!("The {entity} is present at {first}, so it exists in the image."),
            VisualCue::boxes(entity, boxes.clone()),
        )
    } else {
        (
            format!("No {entity} was found in the image."),
            VisualCue::none(entity),
        )
    };
    Reasoning {
        directives: vec![UnderstandDirective {
            capability: Capability::VisualGrounding,
            targets: vec![entity.to_string()],
            instruction_text: format!("Check whether a {entity} is present."),
        }],
        cues: vec![cue],
        think,
        answer: yes_no(!boxes.is_empty()),
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{validate_trace, CuePayload};

    fn bx(x1: i64, y1: i64, x2: i64, y2: i64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    fn rels(items: &[Relation]) -> RelationSet {
        items.iter().copied().collect()
    }

    fn image() -> ImageRef {
        ImageRef::new("img", 200, 200, "img.png")
    }

    fn case(question: &str, qt: QuestionType) -> EvalCase {
        EvalCase {
            id: "c".into(),
            image: image(),
            question: question.into(),
            question_type: qt,
            gold_answer: "x".into(),
            scene: None,
        }
    }

    #[test]
    fn far_apart_boxes_are_left_of_only() {
        // centers (30,30) vs (120,30): distance 90 > 1.5 * 56.57
        let got = relation(
            &bx(10, 10, 50, 50),
            &bx(100, 10, 140, 50),
            &RelationParams::default(),
        );
        assert_eq!(got, rels(&[Relation::LeftOf]));
    }

    #[test]
    fn identical_boxes_are_indeterminate() {
        let a = bx(10, 10, 50, 50);
        assert_eq!(
            relation(&a, &a, &RelationParams::default()),
            rels(&[Relation::Indeterminate])
        );
    }

    #[test]
    fn nested_and_adjacent() {
        let p = RelationParams::default();
        let got = relation(&bx(20, 20, 30, 30), &bx(0, 0, 100, 100), &p);
        assert!(got.contains(&Relation::Inside));
        assert!(!got.contains(&Relation::Overlapping));
        let got = relation(&bx(0, 0, 10, 10), &bx(10, 0, 20, 10), &p);
        assert_eq!(got, rels(&[Relation::LeftOf, Relation::NextTo]));
        let got = relation(&bx(0, 0, 10, 10), &bx(5, 5, 15, 15), &p);
        assert_eq!(
            got,
            rels(&[Relation::LeftOf, Relation::Above, Relation::Overlapping])
        );
    }

    #[test]
    fn tagged_boxes_from_different_images() {
        let a = TaggedBox {
            image_id: "a",
            bbox: bx(0, 0, 1, 1),
        };
        let b = TaggedBox {
            image_id: "b",
            bbox: bx(0, 0, 1, 1),
        };
        assert!(matches!(
            relation_tagged(a, b, &RelationParams::default()),
            Err(GeometryError::DifferentImages(..))
        ));
    }

    fn balloons() -> SceneGraph {
        SceneGraph::new(
            image(),
            vec![
                SceneObject::new("balloon", &["red"], bx(10, 120, 40, 160)),
                SceneObject::new("balloon", &["red"], bx(60, 120, 90, 160)),
                SceneObject::new("balloon", &["white"], bx(15, 20, 45, 60)),
                SceneObject::new("dog", &["brown"], bx(100, 100, 180, 190)),
            ],
        )
    }

    #[test]
    fn counting_rules() {
        let s = balloons();
        assert_eq!(count(&s, "balloons"), 3);
        assert_eq!(count(&s, "red balloon"), 2);
        assert_eq!(count(&s, "Red Balloons"), 2);
        assert_eq!(count(&s, "cat"), 0);
        assert_eq!(count(&SceneGraph::new(image(), vec![]), "balloon"), 0);
        assert!(exists(&s, "dog"));
        assert!(!exists(&s, "blue dog"));
    }

    #[test]
    fn red_balloon_below_white_balloon() {
        let mut s = balloons();
        s.objects.remove(1);
        let c = case(
            "Is the red balloon below the white balloon?",
            QuestionType::Spatial,
        );
        let (ans, trace) = answer(&c, &s, &ReasonerOptions::default()).unwrap();
        assert_eq!(ans, "yes");
        assert!(
            trace.think.contains("140.0") && trace.think.contains("40.0"),
            "{}",
            trace.think
        );
        assert!(trace.think.contains("y-axis"));
        assert!(validate_trace(&trace, &s.image).is_valid());
    }

    #[test]
    fn ambiguity_resolution() {
        let s = balloons();
        let c = case("Is the red balloon above the dog?", QuestionType::Spatial);
        let strict = ReasonerOptions {
            strict: true,
            ..Default::default()
        };
        assert!(matches!(
            answer(&c, &s, &strict),
            Err(GeometryError::AmbiguousEntity { matches: 2, .. })
        ));
        let (ans, _) = answer(&c, &s, &ReasonerOptions::default()).unwrap();
        assert_eq!(ans, "yes");
    }

    #[test]
    fn count_over_empty_scene_has_none_cue() {
        let s = SceneGraph::new(image(), vec![]);
        let c = case("How many cats are there?", QuestionType::Count);
        let (ans, trace) = answer(&c, &s, &ReasonerOptions::default()).unwrap();
        assert_eq!(ans, "0");
        assert_eq!(trace.understand.cues[0].payload, CuePayload::None);
        assert!(validate_trace(&trace, &s.image).is_valid());
    }

    #[test]
    fn absent_entity_gets_none_cue() {
        let c = case("Is there a cat in the image?", QuestionType::Existence);
        let (ans, trace) = answer(&c, &balloons(), &ReasonerOptions::default()).unwrap();
        assert_eq!(ans, "no");
        assert_eq!(trace.understand.cues, vec![VisualCue::none("cat")]);
    }

    #[test]
    fn attribute_questions_unsupported() {
        let c = case("What color is the dog?", QuestionType::Attribute);
        assert!(matches!(
            answer(&c, &balloons(), &ReasonerOptions::default()),
            Err(GeometryError::UnsupportedQuestionType(
                QuestionType::Attribute
            ))
        ));
    }

    #[test]
    fn question_forms_round_trip() {
        let forms = [
            QuestionForm::Spatial {
                subject: "red cup".into(),
                relation: Relation::LeftOf,
                object: "plate".into(),
            },
            QuestionForm::Spatial {
                subject: "box".into(),
                relation: Relation::Contains,
                object: "apple".into(),
            },
            QuestionForm::Count {
                entity: "dogs".into(),
            },
            QuestionForm::Existence {
                entity: "umbrella".into(),
            },
        ];
        for f in forms {
            assert_eq!(
                QuestionForm::parse(&f.question_text()),
                Some(f.clone()),
                "{}",
                f.question_text()
            );
        }
        assert_eq!(QuestionForm::parse("What is this?"), None);
        assert_eq!(
            QuestionForm::parse("Is the cat under the table?"),
            Some(QuestionForm::Spatial {
                subject: "cat".into(),
                relation: Relation::Below,
                object: "table".into()
            })
        );
    }

    #[test]
    fn count_cues_uses_cue_boxes() {
        let cues = vec![
            VisualCue::boxes("cup", vec![bx(0, 0, 1, 1), bx(2, 2, 3, 3)]),
            VisualCue::none("plate"),
        ];
        assert_eq!(count_cues(&cues, "cups"), 2);
        assert_eq!(count_cues(&cues, "plate"), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BoundingBox> {
            (0i64..500, 0i64..500, 1i64..300, 1i64..300)
                .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
        }

        proptest! {
            #[test]
            fn inverse_consistency(a in arb_box(), b in arb_box()) {
                let p = RelationParams::default();
                let ab = relation(&a, &b, &p);
                let ba = relation(&b, &a, &p);
                for r in &ab {
                    prop_assert!(ba.contains(&r.inverse()), "{r:?} in {ab:?} but inverse missing from {ba:?}");
                }
                prop_assert!(!(ab.contains(&Relation::LeftOf) && ba.contains(&Relation::LeftOf)));
                prop_assert!(!(ab.contains(&Relation::Above) && ba.contains(&Relation::Above)));
            }

            #[test]
            fn translation_invariant(a in arb_box(), b in arb_box(), dx in -1000i64..1000, dy in -1000i64..1000) {
                let p = RelationParams::default();
                prop_assert_eq!(relation(&a, &b, &p), relation(&a.translate(dx, dy), &b.translate(dx, dy), &p));
            }

            #[test]
            fn count_monotone(n in 0usize..6, extra in arb_box()) {
                let mut s = SceneGraph::new(ImageRef::new("i", 1000, 1000, "u"), vec![]);
                for i in 0..n {
                    s.objects.push(SceneObject::new("cup", &["red"], bx(i as i64, 0, i as i64 + 5, 5)));
                    s.objects.push(SceneObject::new("plate", &[], bx(i as i64, 0, i as i64 + 5, 5)));
                }
                let before = count(&s, "red cup");
                s.objects.push(SceneObject::new("cup", &["red", "large"], extra));
                prop_assert_eq!(count(&s, "red cup"), before + 1);
            }
        }
    }
}
