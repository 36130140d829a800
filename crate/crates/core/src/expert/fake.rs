//! Scripted chat-completion endpoint for tests and offline runs.
//!
//! Replies are a pure function of the request, so a fixture run is fully
//! reproducible. The server counts requests and tracks peak concurrency.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::chat::{ChatRequest, ChatResponse};
use crate::eval::Fnv;

#[derive(Debug, Clone, Default)]
pub struct FakeScript {
    /// `(needle, reply)`: the first rule whose needle occurs in the last
    /// user message wins over the built-in replies.
    pub rules: Vec<(String, String)>,
    /// Answer the first N requests with HTTP 503.
    pub fail_first: usize,
    /// Hold every request this long before replying.
    pub delay: Duration,
}

#[derive(Debug, Default)]
pub struct FakeStats {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl FakeStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a FakeStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a FakeStats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Clone)]
struct AppState {
    script: Arc<FakeScript>,
    stats: Arc<FakeStats>,
}

async fn completions(State(st): State<AppState>, Json(req): Json<ChatRequest>) -> Response {
    let n = st.stats.requests.fetch_add(1, Ordering::SeqCst);
    let _guard = InFlight::enter(&st.stats);
    if !st.script.delay.is_zero() {
        tokio::time::sleep(st.script.delay).await;
    }
    if n < st.script.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "scripted failure").into_response();
    }
    Json(ChatResponse::from_text(reply(&req, &st.script))).into_response()
}

pub fn router(script: FakeScript, stats: Arc<FakeStats>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(AppState {
            script: Arc::new(script),
            stats,
        })
}

/// Serve until the listener fails or the task is dropped.
pub async fn serve(
    listener: TcpListener,
    script: FakeScript,
    stats: Arc<FakeStats>,
) -> std::io::Result<()> {
    axum::serve(listener, router(script, stats)).await
}

/// A fake endpoint on an ephemeral local port, stopped on drop.
pub struct FakeServer {
    pub addr: SocketAddr,
    pub stats: Arc<FakeStats>,
    task: JoinHandle<()>,
}

impl FakeServer {
    pub async fn spawn(script: FakeScript) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(FakeStats::default());
        let s = stats.clone();
        let task = tokio::spawn(async move {
            let _ = serve(listener, script, s).await;
        });
        Ok(Self { addr, stats, task })
    }

    /// Base URL to put in an expert config.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

const STOP_WORDS: &[&str] = &[
    "is", "are", "was", "were", "of", "in", "on", "to", "and", "or", "there", "than", "near",
    "next", "behind", "under", "over", "above", "below", "left", "right", "with", "inside",
    "contain", "contains", "does", "do", "the", "a", "an", "that", "this", "it", "image",
    "picture", "higher", "lower", "what", "which",
];

/// Noun phrases following "the", "a", "an" or "many", cut at a stop word.
pub fn guess_entities(question: &str) -> Vec<String> {
    let tokens: Vec<String> = question
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if matches!(tokens[i].as_str(), "the" | "a" | "an" | "many") {
            let start = i + 1;
            let mut end = start;
            while end < tokens.len() && !STOP_WORDS.contains(&tokens[end].as_str()) {
                end += 1;
            }
            if end > start {
                let phrase = tokens[start..end].join(" ");
                if !out.contains(&phrase) {
                    out.push(phrase);
                }
            }
            i = end.max(start);
        } else {
            i += 1;
        }
    }
    out
}

fn between<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = s.find(open)? + open.len();
    let end = s.rfind(close)?;
    (end >= start).then(|| &s[start..end])
}

fn fake_box(target: &str) -> [u64; 4] {
    let mut h = Fnv::new();
    h.write(target.as_bytes());
    let v = h.finish();
    let x1 = v % 200;
    let y1 = (v >> 8) % 200;
    [x1, y1, x1 + 10 + (v >> 16) % 100, y1 + 10 + (v >> 24) % 100]
}

/// Built-in deterministic reply for each prompt family.
pub fn reply(req: &ChatRequest, script: &FakeScript) -> String {
    let text = req.last_user_text();
    if let Some((_, r)) = script
        .rules
        .iter()
        .find(|(needle, _)| text.contains(needle.as_str()))
    {
        return r.clone();
    }
    if text.contains("identify and focus on the specific physical objects") {
        let q = between(&text, "For the question:'", "', identify and focus").unwrap_or("");
        return guess_entities(q).join("\n");
    }
    if text.contains("identify the task used to gather") {
        let entities: Vec<String> = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "assistant")
            .map(|m| {
                m.text()
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        return match entities.first() {
            None => "Global Understanding".into(),
            Some(first) => format!(
                "Grounded Caption: {first}\nVisual Grounding: {}",
                entities.join(", ")
            ),
        };
    }
    if text.contains("give its bounding box") {
        let target = between(&text, "Describe ", " in one sentence").unwrap_or("the image");
        return target
            .split(" and ")
            .map(|t| {
                let [a, b, c, d] = fake_box(t);
                format!("{t} [{a}, {b}, {c}, {d}]")
            })
            .collect::<Vec<_>>()
            .join(", ");
    }
    if let Some(target) = between(&text, "Read the text on ", ". Output only the text.") {
        return format!("TEXT ON {}", target.to_uppercase());
    }
    if text.contains("summarize the overall scene context") {
        return "An everyday scene with several objects.".into();
    }
    if let Some(target) = between(&text, "Describe ", " in one sentence.") {
        return format!("A photo of {target}.");
    }
    "I cannot help with that.".into()
}
