mod common;

use std::collections::BTreeMap;

use forge_core::budget::{
    fit_to_context, truncate_by_score, BudgetConfig, Bytes4Tokenizer, DefaultTokenizer, Tokenizer, TokenizerKind,
};
use forge_core::corpus::{DocSummaryPair, Message, QaPair};
use forge_core::filters::{
    clean_text, compression_ratio_filter, cosine, embed_text, qa_similarity, qa_similarity_filter, quality_filter,
    truncate_by_length, CaseMode, CleanConfig, QualityConfig,
};
use forge_core::prompts::{assemble_context, format_conversation, parse_formatted, PromptScheme};
use proptest::prelude::*;
use rand::Rng;

fn clean_configs() -> impl Strategy<Value = CleanConfig> {
    (any::<bool>(), any::<bool>(), any::<bool>(), 0u8..3, any::<bool>()).prop_map(
        |(stop, punct, special, case, ws)| {
            CleanConfig {
                remove_stopwords: stop,
                stopword_list: ["the", "a", "of", "An"].iter().map(|s| s.to_string()).collect(),
                strip_punctuation: punct,
                remove_special_chars: special,
                case_mode: [CaseMode::Preserve, CaseMode::Lower, CaseMode::Upper][case as usize],
                collapse_whitespace: ws,
                ..CleanConfig::default()
            }
            .normalized()
        },
    )
}

/// Cosine over explicit term-count maps, no hashing.
fn brute_cosine(a: &str, b: &str) -> f64 {
    let counts = |s: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            *m.entry(w.to_lowercase()).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (counts(a), counts(b));
    let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0)).sum();
    let nx = x.values().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.values().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        (dot / (nx * ny)).clamp(0.0, 1.0)
    }
}

fn tokenizers() -> [&'static dyn Tokenizer; 2] {
    [&DefaultTokenizer, &Bytes4Tokenizer]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn clean_is_idempotent(text in common::any_text(), cfg in clean_configs()) {
        let once = clean_text(&text, &cfg);
        prop_assert_eq!(clean_text(&once, &cfg), once);
    }

    #[test]
    fn filters_are_pure(text in common::any_text()) {
        let q = QualityConfig { require_terminal_punctuation: true, ..QualityConfig::default() };
        prop_assert_eq!(quality_filter(&text, &q), quality_filter(&text, &q));
    }

    #[test]
    fn cosine_properties(a in common::any_text(), b in common::any_text()) {
        let (ea, eb) = (embed_text(&a), embed_text(&b));
        let ab = cosine(&ea, &eb);
        prop_assert_eq!(ab, cosine(&eb, &ea));
        prop_assert!((0.0..=1.0).contains(&ab));
        if !ea.is_zero() {
            prop_assert_eq!(cosine(&ea, &ea), 1.0);
        }
    }

    #[test]
    fn truncation_is_a_token_prefix(text in common::any_text(), max in 0usize..30) {
        for tok in tokenizers() {
            let out = truncate_by_length(&text, max, tok);
            prop_assert!(tok.count(&out) <= max);
            prop_assert!(text.starts_with(&out));
            let spans = tok.split(&text);
            if spans.len() <= max {
                prop_assert_eq!(&out, &text);
            } else {
                prop_assert_eq!(out.len(), if max == 0 { 0 } else { spans[max - 1].end });
                prop_assert_eq!(tok.count(&out), max);
            }
        }
    }

    #[test]
    fn spans_reconstruct_text(text in common::any_text()) {
        for tok in tokenizers() {
            let spans = tok.split(&text);
            let mut rebuilt = String::new();
            let mut at = 0;
            for s in &spans {
                prop_assert!(s.start >= at && s.start < s.end && s.end <= text.len());
                let gap = &text[at..s.start];
                prop_assert!(gap.chars().all(char::is_whitespace), "gap {:?}", gap);
                rebuilt.push_str(gap);
                rebuilt.push_str(&text[s.clone()]);
                at = s.end;
            }
            rebuilt.push_str(&text[at..]);
            prop_assert!(text[at..].chars().all(char::is_whitespace));
            prop_assert_eq!(rebuilt, text.clone());
        }
    }

    #[test]
    fn fit_respects_budget(text in common::any_text(), budget in 1usize..40, pad in any::<bool>(), bytes in any::<bool>()) {
        let kind = if bytes { TokenizerKind::Bytes4 } else { TokenizerKind::Default };
        let cfg = BudgetConfig {
            context_tokens: budget,
            pad_to_max: pad,
            pad_symbol: if bytes { "<p>".into() } else { "<pad>".into() },
            tokenizer: kind,
        };
        let tok = kind.tokenizer();
        prop_assume!(cfg.validate(tok).is_ok());
        let n = tok.count(&fit_to_context(&text, &cfg, tok));
        prop_assert!(n <= budget);
        if pad {
            prop_assert_eq!(n, budget);
        }
    }
}

#[test]
fn similarity_matches_brute_force() {
    let mut r = common::rng(11);
    for _ in 0..1000 {
        let input = common::random_text(&mut r, 10);
        let output = common::random_text(&mut r, 10);
        let pair = QaPair { input: input.clone(), output: output.clone() };
        let expect = brute_cosine(&input, &output);
        assert!((qa_similarity(&pair) - expect).abs() <= 1e-12, "{input:?} / {output:?}");
    }
    let pair = QaPair { input: "red green blue".into(), output: "red yellow".into() };
    let expect = 1.0 / (3f64.sqrt() * 2f64.sqrt());
    assert!((qa_similarity(&pair) - expect).abs() <= 1e-12);
    assert!(!qa_similarity_filter(&pair, 0.5).keep);
    assert!(qa_similarity_filter(&pair, 0.4).keep);
}

#[test]
fn compression_ratio_matches_direct_counts() {
    let mut r = common::rng(12);
    for _ in 0..1000 {
        let pair = DocSummaryPair {
            document: common::random_text(&mut r, 60),
            summary: common::random_text(&mut r, 8),
        };
        let (lo, hi) = (r.random_range(0.0..3.0), r.random_range(3.0..40.0));
        for tok in tokenizers() {
            let doc = tok.count(&pair.document) as f64;
            let sum = tok.count(&pair.summary) as f64;
            let expect_keep = sum > 0.0 && doc / sum >= lo && doc / sum <= hi;
            assert_eq!(compression_ratio_filter(&pair, lo, hi, tok).keep, expect_keep);
        }
    }
}

#[test]
fn format_round_trip_and_terminator() {
    let scheme = PromptScheme::default();
    let mut r = common::rng(13);
    for _ in 0..500 {
        let p = common::random_path(&mut r, 5, &scheme, false);
        let text = format_conversation(&p, &scheme).unwrap();
        assert!(text.ends_with(&scheme.terminator));
        assert_eq!(parse_formatted(&text, &scheme).unwrap(), p);
    }
}

#[test]
fn assemble_context_drops_minimum() {
    let scheme = PromptScheme::default();
    let tok = DefaultTokenizer;
    let mut r = common::rng(14);
    for _ in 0..300 {
        let p = common::random_path(&mut r, 5, &scheme, false);
        let history: Vec<(Message, Message)> = p.exchanges().map(|(h, b)| (h.clone(), b.clone())).collect();
        let prompt = common::marker_free_text(&mut r, 6, &scheme);
        let budget = r.random_range(1..120);
        match assemble_context(&history, &prompt, &scheme, budget, &tok) {
            Ok(ctx) => {
                assert!(tok.count(&ctx.text) <= budget);
                if ctx.dropped > 0 {
                    // Keeping one more exchange would not have fit.
                    let wider = assemble_context(&history[ctx.dropped - 1..], &prompt, &scheme, usize::MAX, &tok).unwrap();
                    assert!(tok.count(&wider.text) > budget);
                }
            }
            Err(e) => {
                assert_eq!(e.code(), "prompt_too_large");
                let alone = assemble_context(&[], &prompt, &scheme, usize::MAX, &tok).unwrap();
                assert!(tok.count(&alone.text) > budget);
            }
        }
    }
}

/// Exhaustive reference for score truncation: at each step try every
/// removable exchange, keep the candidates with the lowest score, and take the
/// earliest of them.
fn brute_removal_order(scores: &[f64], fits: impl Fn(&[usize]) -> bool) -> Option<Vec<usize>> {
    let mut kept: Vec<usize> = (0..scores.len()).collect();
    let mut removed = Vec::new();
    while !fits(&kept) {
        let candidates: Vec<usize> = kept[..kept.len() - 1].to_vec();
        if candidates.is_empty() {
            return None;
        }
        let min = candidates.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let pick = *candidates.iter().find(|&&i| scores[i] == min).unwrap();
        kept.retain(|&i| i != pick);
        removed.push(pick);
    }
    Some(removed)
}

#[test]
fn truncate_by_score_matches_brute_force() {
    let scheme = PromptScheme::default();
    let tok = DefaultTokenizer;
    let mut r = common::rng(15);
    for _ in 0..500 {
        let p = common::random_path(&mut r, 6, &scheme, true);
        let ex: Vec<(Message, Message)> = p.exchanges().map(|(h, b)| (h.clone(), b.clone())).collect();
        let scores: Vec<f64> = ex
            .iter()
            .map(|(h, b)| h.turn_score.unwrap().min(b.turn_score.unwrap()))
            .collect();
        let full = tok.count(&format_conversation(&p, &scheme).unwrap());
        let budget = r.random_range(1..=full + 2);
        let fits = |kept: &[usize]| {
            let sub = forge_core::corpus::ConversationPath::from_exchanges(kept.iter().map(|&i| ex[i].clone())).unwrap();
            tok.count(&format_conversation(&sub, &scheme).unwrap()) <= budget
        };
        let expected = brute_removal_order(&scores, fits);
        match (truncate_by_score(&p, budget, &scheme, &tok), expected) {
            (Ok(t), Some(order)) => assert_eq!(t.removed, order),
            (Err(e), None) => assert_eq!(e.code(), "cannot_fit"),
            (got, want) => panic!("mismatch: {got:?} vs {want:?}"),
        }
    }
}
