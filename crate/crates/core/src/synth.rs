//! Seeded generators for scenes, benchmark cases and valid traces.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::eval::{EvalCase, QuestionType};
use crate::geometry::{reason, QuestionForm, ReasonerOptions, Relation, SceneGraph, SceneObject};
use crate::grammar::{render_into, GrammarConfig};
use crate::trace::{
    BoundingBox, Capability, CuePayload, ImageRef, ReasoningTrace, TraceKind, UnderstandDirective,
    Understanding, VisualCue,
};

pub const LABELS: &[&str] = &[
    "balloon", "dog", "cat", "cup", "plate", "car", "tree", "person", "chair", "bottle",
    "umbrella", "kite",
];
pub const ATTRIBUTES: &[&str] = &[
    "red", "white", "blue", "green", "small", "large", "wooden", "plastic",
];

/// Largest image side produced by [`random_scene`].
pub const MAX_SIDE: u32 = 1022;

pub fn random_box<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> BoundingBox {
    let (w, h) = (i64::from(width), i64::from(height));
    let x1 = rng.random_range(0..w);
    let y1 = rng.random_range(0..h);
    let x2 = rng.random_range(x1 + 1..=w);
    let y2 = rng.random_range(y1 + 1..=h);
    BoundingBox::new(x1, y1, x2, y2)
}

/// Scene with up to `max_objects` objects on an image of at most 1022 px per side.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, id: &str, max_objects: usize) -> SceneGraph {
    let width = rng.random_range(16..=MAX_SIDE);
    let height = rng.random_range(16..=MAX_SIDE);
    let image = ImageRef::new(id, width, height, format!("synthetic://{id}.png"));
    let n = rng.random_range(0..=max_objects);
    let objects = (0..n)
        .map(|_| {
            let label = *LABELS.choose(rng).expect("non-empty");
            let n_attr = rng.random_range(0..=2);
            let mut attrs: Vec<&str> = ATTRIBUTES.choose_multiple(rng, n_attr).copied().collect();
            attrs.sort_unstable();
            SceneObject::new(label, &attrs, random_box(rng, width, height))
        })
        .collect();
    SceneGraph::new(image, objects)
}

/// A query that usually names something in the scene, sometimes not.
fn random_query<R: Rng + ?Sized>(rng: &mut R, scene: &SceneGraph) -> String {
    if !scene.objects.is_empty() && rng.random_bool(0.75) {
        let o = scene.objects.choose(rng).expect("non-empty");
        match o.attributes.choose(rng) {
            Some(a) if rng.random_bool(0.4) => format!("{a} {}", o.label),
            _ => o.label.clone(),
        }
    } else {
        let label = *LABELS.choose(rng).expect("non-empty");
        if rng.random_bool(0.3) {
            format!("{} {label}", ATTRIBUTES.choose(rng).expect("non-empty"))
        } else {
            label.to_string()
        }
    }
}

const SPATIAL_RELATIONS: &[Relation] = &[
    Relation::LeftOf,
    Relation::RightOf,
    Relation::Above,
    Relation::Below,
    Relation::Inside,
    Relation::Contains,
    Relation::NextTo,
    Relation::Overlapping,
];

/// Random spatial, count or existence question over `scene`, gold-labeled
/// by the geometric reasoner.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R, scene: &SceneGraph, id: &str) -> EvalCase {
    let form = match rng.random_range(0..3) {
        0 => {
            let subject = random_query(rng, scene);
            let mut object = random_query(rng, scene);
            for _ in 0..8 {
                if object != subject {
                    break;
                }
                object = random_query(rng, scene);
            }
            if object == subject {
                object = format!("{subject} stand");
            }
            QuestionForm::Spatial {
                subject,
                relation: *SPATIAL_RELATIONS.choose(rng).expect("non-empty"),
                object,
            }
        }
        1 => {
            let q = random_query(rng, scene);
            QuestionForm::Count {
                entity: if rng.random_bool(0.7) {
                    format!("{q}s")
                } else {
                    q
                },
            }
        }
        _ => QuestionForm::Existence {
            entity: random_query(rng, scene),
        },
    };
    let gold = reason(&form, scene, &ReasonerOptions::default())
        .expect("non-strict reasoning over generated scenes is total")
        .answer;
    EvalCase {
        id: id.to_string(),
        image: scene.image.clone(),
        question: form.question_text(),
        question_type: form.question_type(),
        gold_answer: gold,
        scene: Some(scene.clone()),
    }
}

/// `n` cases, each on its own random scene.
pub fn random_benchmark<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_objects: usize,
) -> Vec<EvalCase> {
    (0..n)
        .map(|i| {
            let id = format!("case-{i:05}");
            let scene = random_scene(rng, &format!("img-{i:05}"), max_objects);
            random_case(rng, &scene, &id)
        })
        .collect()
}

const TEXT_POOL: &[char] = &[
    'a', 'b', 'c', 'x', 'y', 'z', 'A', 'N', 'T', 'E', ' ', ' ', ' ', '\n', ':', '[', ']', '(', ')',
    ',', '.', '"', '\\', '\'', '1', '5', '9', 'é', '中', '🎈', '\t', '-',
];
const LABEL_POOL: &[char] = &[
    'a', 'b', 'e', 'k', 'o', 'r', 's', 'B', 'Z', '1', '7', '-', '\'', '/', '&', 'é', ' ',
];

fn random_text<R: Rng + ?Sized>(rng: &mut R, pool: &[char], min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| *pool.choose(rng).expect("non-empty"))
        .collect()
}

fn random_label<R: Rng + ?Sized>(rng: &mut R) -> String {
    loop {
        let s = random_text(rng, LABEL_POOL, 1, 12);
        let t = s.trim();
        if !t.is_empty() {
            return t.to_string();
        }
    }
}

fn free_of_markers(s: &str, cfg: &GrammarConfig) -> bool {
    [
        &cfg.understand_marker,
        &cfg.think_marker,
        &cfg.answer_marker,
    ]
    .iter()
    .all(|m| !s.contains(m.as_str()))
}

fn random_content<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GrammarConfig,
    min: usize,
    max: usize,
    single_line: bool,
) -> String {
    loop {
        let mut s = random_text(rng, TEXT_POOL, min, max);
        if single_line {
            s = s.replace(['\n', '\r'], " ");
        }
        if free_of_markers(&s, cfg) && !s.trim().is_empty() {
            return s;
        }
    }
}

/// A random trace that satisfies every invariant and renders under `cfg`;
/// `raw_text` holds the rendering.
pub fn random_trace<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> ReasoningTrace {
    let answer = random_content(rng, cfg, 1, 24, false);
    if rng.random_bool(0.1) {
        return render_into(ReasoningTrace::shortcut(answer), cfg)
            .expect("generated shortcut trace renders");
    }
    let side = rng.random_range(1..=MAX_SIDE);
    let n_cues = rng.random_range(1..=5);
    let mut cues: Vec<VisualCue> = (0..n_cues)
        .map(|_| {
            let label = random_label(rng);
            let payload = match rng.random_range(0..4) {
                0 => CuePayload::Boxes {
                    boxes: (0..rng.random_range(1..=3))
                        .map(|_| random_box(rng, side, side))
                        .collect(),
                },
                1 => CuePayload::Text {
                    text: random_content(rng, cfg, 0, 30, false),
                },
                2 => CuePayload::Caption {
                    text: random_content(rng, cfg, 0, 30, false),
                },
                _ => CuePayload::None,
            };
            VisualCue { label, payload }
        })
        .collect();
    cues.shuffle(rng);
    let labels: Vec<String> = cues.iter().map(|c| c.label.clone()).collect();
    let n_dir = rng.random_range(0..=3);
    let directives = (0..n_dir)
        .map(|_| {
            let capability = *Capability::ALL.choose(rng).expect("non-empty");
            let min_targets = usize::from(!capability.allows_no_targets());
            let k = rng.random_range(min_targets..=labels.len().min(3));
            let targets = labels.choose_multiple(rng, k).cloned().collect();
            UnderstandDirective {
                capability,
                targets,
                instruction_text: random_content(rng, cfg, 1, 40, true),
            }
        })
        .collect();
    let trace = ReasoningTrace {
        kind: TraceKind::Unified,
        understand: Understanding { directives, cues },
        think: random_content(rng, cfg, 1, 80, false),
        answer,
        raw_text: String::new(),
    };
    render_into(trace, cfg).expect("generated trace renders")
}

/// Question types the geometric reasoner answers.
pub const ORACLE_TYPES: [QuestionType; 3] = [
    QuestionType::Spatial,
    QuestionType::Count,
    QuestionType::Existence,
];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_seeded() {
        let a = random_benchmark(&mut ChaCha8Rng::seed_from_u64(3), 20, 10);
        let b = random_benchmark(&mut ChaCha8Rng::seed_from_u64(3), 20, 10);
        assert_eq!(a, b);
        for c in &a {
            let s = c.scene.as_ref().unwrap();
            assert!(s.objects.len() <= 10);
            assert!(s.image.width <= MAX_SIDE && s.image.height <= MAX_SIDE);
            s.validate().unwrap();
            assert!(ORACLE_TYPES.contains(&c.question_type));
        }
    }

    #[test]
    fn random_traces_are_valid() {
        let cfg = GrammarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = random_trace(&mut rng, &cfg);
            assert!(crate::trace::validate_structure(&t).is_valid());
        }
    }
}
