#![allow(dead_code)]

use forge_core::corpus::{ConversationPath, Message, Payload, QaPair, Record};
use forge_core::prompts::PromptScheme;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WORDS: &[&str] = &[
    "the", "model", "answer", "data", "red", "green", "blue", "fine", "tune", "token", "path", "water", "river",
    "stone", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "why", "how", "what", "is", "a", "an",
    "of", "to", "in", "café", "naïve", "über", "日本", "数据", "42", "7",
];
const PUNCT: &[&str] = &[".", ",", "!", "?", ";", "'", "\"", "(", ")", "-", "<", ">", ":"];

/// Random prose: words, punctuation and occasional odd spacing.
pub fn random_text(r: &mut impl Rng, max_words: usize) -> String {
    let n = r.random_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str(match r.random_range(0..20) {
                0 => "  ",
                1 => "\n",
                2 => "\t",
                _ => " ",
            });
        }
        out.push_str(WORDS[r.random_range(0..WORDS.len())]);
        if r.random_range(0..5) == 0 {
            out.push_str(PUNCT[r.random_range(0..PUNCT.len())]);
        }
    }
    out
}

pub fn marker_free_text(r: &mut impl Rng, max_words: usize, scheme: &PromptScheme) -> String {
    loop {
        let t = random_text(r, max_words);
        if !scheme.body_has_marker(&t) {
            return t;
        }
    }
}

pub fn random_path(r: &mut impl Rng, max_exchanges: usize, scheme: &PromptScheme, scored: bool) -> ConversationPath {
    let n = r.random_range(1..=max_exchanges);
    let mut msgs = Vec::new();
    for _ in 0..n {
        let mut h = Message::human(marker_free_text(r, 12, scheme));
        let mut b = Message::bot(marker_free_text(r, 12, scheme));
        if scored {
            h = h.with_score(r.random_range(0..4) as f64 / 4.0);
            b = b.with_score(r.random_range(0..4) as f64 / 4.0);
        }
        msgs.push(h);
        msgs.push(b);
    }
    ConversationPath::new(msgs).unwrap()
}

pub fn qa_record(id: &str, input: &str, output: &str) -> Record {
    Record::new(
        id,
        "test",
        Payload::Qa(QaPair {
            input: input.into(),
            output: output.into(),
        }),
    )
}

/// Proptest strategy over arbitrary unicode, biased towards interesting
/// characters.
pub fn any_text() -> impl Strategy<Value = String> {
    prop_oneof![
        ".{0,60}",
        "[a-zA-Z0-9 .,!?<>:_|\\t\\n]{0,80}",
        "[\\u{0}-\\u{7f}\\u{a0}-\\u{2fff}\\u{fffd}]{0,40}",
    ]
}

pub const PROFANE: &[&str] = &["darn", "heck"];

/// Q&A JSONL lines: mostly on-topic answers, with some profanity, some
/// off-topic answers and a few empty or malformed lines mixed in.
pub fn synthetic_qa_jsonl(seed: u64, n: usize) -> String {
    let mut r = rng(seed);
    let mut out = String::new();
    for i in 0..n {
        match r.random_range(0..50) {
            0 => out.push_str("{\"input\": \"no output\"}\n"),
            1 => out.push_str("not json\n"),
            _ => {
                let q = random_text(&mut r, 10);
                let mut a = if r.random_range(0..4) == 0 {
                    random_text(&mut r, 40)
                } else {
                    format!("{q} {}", random_text(&mut r, 30))
                };
                if r.random_range(0..15) == 0 {
                    a.push_str(&format!(" {}", PROFANE[i % 2]));
                }
                let v = serde_json::json!({ "input": format!("q{i} {q}"), "output": a });
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
    }
    out
}
