//! Seeded fixtures shared by the benchmarks.

use griffonforge_core::filters::RawQA;
use griffonforge_core::synth::{random_benchmark, random_trace, LABELS};
use griffonforge_core::{EvalCase, GrammarConfig, ImageRef, ReasoningTrace};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn traces(n: usize) -> Vec<ReasoningTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = GrammarConfig::default();
    (0..n).map(|_| random_trace(&mut rng, &cfg)).collect()
}

pub fn cases(n: usize) -> Vec<EvalCase> {
    random_benchmark(&mut ChaCha8Rng::seed_from_u64(2), n, 10)
}

/// QA pairs cycling through a few question shapes.
pub fn questions(n: usize) -> Vec<RawQA> {
    let shapes = [
        "Is the red {l} to the left of the wooden {l} near the window?",
        "What is the man holding next to the {l} in the picture?",
        "How many {l}s are on top of the table?",
        "What is the name of this {l}?",
    ];
    (0..n)
        .map(|i| {
            let label = LABELS[i % LABELS.len()];
            RawQA {
                id: i.to_string(),
                image: ImageRef::new(format!("img-{}", i / 3), 640, 480, "synthetic://x.png"),
                question: shapes[i % shapes.len()].replace("{l}", label),
                answer: if i % 2 == 0 {
                    "yes".into()
                } else {
                    "a cup".into()
                },
                source_dataset: "bench".into(),
            }
        })
        .collect()
}
