//! Deterministic inputs shared by the benchmarks.

use forge_core::corpus::{Dataset, Payload, QaPair, Record};
use forge_core::Lcg64;

const WORDS: &[&str] = &[
    "the", "model", "answer", "question", "data", "train", "token", "adapter", "rank", "layer", "weight",
    "prompt", "human", "bot", "score", "filter", "clean", "text", "context", "budget",
];

pub fn words(rng: &mut Lcg64, n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(WORDS[rng.next_u32() as usize % WORDS.len()]);
        if rng.next_u32() % 11 == 0 {
            out.push(',');
        }
    }
    out
}

/// `n` question/answer records with answers that overlap their questions.
pub fn qa_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = Lcg64::new(seed);
    let records = (0..n)
        .map(|i| {
            let q = words(&mut rng, 12);
            let a = format!("{q} {}", words(&mut rng, 40));
            Record::new(format!("bench:{i}"), "bench", Payload::Qa(QaPair { input: q, output: a }))
        })
        .collect();
    Dataset::from_records(records)
}

/// The same records as QA JSONL lines.
pub fn qa_jsonl(n: usize, seed: u64) -> String {
    let mut rng = Lcg64::new(seed);
    let mut out = String::new();
    for _ in 0..n {
        let q = words(&mut rng, 12);
        let a = format!("{q} {}", words(&mut rng, 40));
        out.push_str(&format!("{{\"input\":\"{q}\",\"output\":\"{a}\"}}\n"));
    }
    out
}
