//! Data engine and evaluation toolkit for understand-think-answer visual
//! reasoning traces.

pub mod chat;
pub mod eval;
pub mod expert;
pub mod filters;
pub mod geometry;
pub mod grammar;
pub mod service;
pub mod synth;
pub mod trace;

pub use eval::{EvalCase, ModelClient, QuestionType, RunReport};
pub use filters::{FilterDecision, KeywordLexicon, RawQA};
pub use geometry::{Relation, SceneGraph, SceneObject};
pub use grammar::{GrammarConfig, SegmentSpans};
pub use trace::{
    clip_box, validate_trace, BoundingBox, Capability, CuePayload, ImageRef, ReasoningTrace,
    TraceKind, UnderstandDirective, Understanding, ValidationReport, ViolationCode, VisualCue,
};
