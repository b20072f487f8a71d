//! Record-level cleaning and keep/drop filters.
//!
//! Every filter is a pure function of its input and configuration. A drop
//! always carries a reason from the filter's fixed vocabulary (see
//! [`reason_vocabulary`]), which is what pipeline reports aggregate on.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory as Gc};

use crate::budget::Tokenizer;
use crate::corpus::{DocSummaryPair, QaPair};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterVerdict {
    pub keep: bool,
    pub reason: Option<String>,
    pub filter_name: &'static str,
    /// Measured value behind the decision (similarity, ratio), when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
}

impl FilterVerdict {
    pub fn keep(filter_name: &'static str) -> Self {
        Self {
            keep: true,
            reason: None,
            filter_name,
            metric: None,
        }
    }

    pub fn drop(filter_name: &'static str, reason: impl Into<String>) -> Self {
        Self {
            keep: false,
            reason: Some(reason.into()),
            filter_name,
            metric: None,
        }
    }

    fn with_metric(mut self, m: f64) -> Self {
        self.metric = Some(m);
        self
    }
}

/// Reasons each filter may emit. `profanity:` is a prefix; the matched word follows.
pub fn reason_vocabulary(filter_name: &str) -> &'static [&'static str] {
    match filter_name {
        "quality" => &[
            "too_short",
            "too_long",
            "whitespace_run",
            "nonprintable_ratio",
            "incomplete_sentence",
        ],
        "profanity" => &["profanity:"],
        "similarity" => &["low_similarity"],
        "compression_ratio" => &["empty_summary", "ratio_low", "ratio_high"],
        "score" => &["scorer_unavailable", "scorer_protocol"],
        "score_filter" => &["below_threshold", "drop_fraction"],
        "format" => &["marker_in_body"],
        "truncate_by_score" => &["cannot_fit"],
        _ => &[],
    }
}

// ---------------------------------------------------------------------------
// Cleaning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharClass {
    Letter,
    Mark,
    Number,
    Punctuation,
    Symbol,
    Separator,
    Other,
}

impl CharClass {
    pub fn of(c: char) -> Self {
        match get_general_category(c) {
            Gc::UppercaseLetter
            | Gc::LowercaseLetter
            | Gc::TitlecaseLetter
            | Gc::ModifierLetter
            | Gc::OtherLetter => CharClass::Letter,
            Gc::NonspacingMark | Gc::SpacingMark | Gc::EnclosingMark => CharClass::Mark,
            Gc::DecimalNumber | Gc::LetterNumber | Gc::OtherNumber => CharClass::Number,
            Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::OpenPunctuation
            | Gc::ClosePunctuation
            | Gc::InitialPunctuation
            | Gc::FinalPunctuation
            | Gc::OtherPunctuation => CharClass::Punctuation,
            Gc::MathSymbol | Gc::CurrencySymbol | Gc::ModifierSymbol | Gc::OtherSymbol => {
                CharClass::Symbol
            }
            Gc::SpaceSeparator | Gc::LineSeparator | Gc::ParagraphSeparator => {
                CharClass::Separator
            }
            _ => CharClass::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseMode {
    #[default]
    Preserve,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub remove_stopwords: bool,
    pub stopword_list: BTreeSet<String>,
    pub strip_punctuation: bool,
    pub remove_special_chars: bool,
    /// Character classes kept by special-character removal. Whitespace is
    /// always kept.
    pub allowed_classes: BTreeSet<CharClass>,
    pub case_mode: CaseMode,
    pub collapse_whitespace: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            remove_stopwords: false,
            stopword_list: BTreeSet::new(),
            strip_punctuation: false,
            remove_special_chars: false,
            allowed_classes: [
                CharClass::Letter,
                CharClass::Mark,
                CharClass::Number,
                CharClass::Punctuation,
                CharClass::Separator,
            ]
            .into_iter()
            .collect(),
            case_mode: CaseMode::Preserve,
            collapse_whitespace: false,
        }
    }
}

impl CleanConfig {
    /// Lowercase the stopword list so lookups can be case-insensitive.
    pub fn normalized(mut self) -> Self {
        self.stopword_list = self.stopword_list.iter().map(|w| w.to_lowercase()).collect();
        self
    }
}

/// Apply, in order: case mapping, special-character removal, punctuation
/// removal, stopword removal, whitespace collapse. When stopwords are removed
/// the surviving tokens are rejoined with single spaces.
pub fn clean_text(text: &str, cfg: &CleanConfig) -> String {
    let mut s = match cfg.case_mode {
        CaseMode::Preserve => text.to_string(),
        CaseMode::Lower => text.to_lowercase(),
        CaseMode::Upper => text.to_uppercase(),
    };
    if cfg.remove_special_chars {
        s.retain(|c| c.is_whitespace() || cfg.allowed_classes.contains(&CharClass::of(c)));
    }
    if cfg.strip_punctuation {
        s.retain(|c| CharClass::of(c) != CharClass::Punctuation);
    }
    if cfg.remove_stopwords {
        let kept: Vec<&str> = s
            .split_whitespace()
            .filter(|t| !cfg.stopword_list.contains(&t.to_lowercase()))
            .collect();
        s = kept.join(" ");
    }
    if cfg.collapse_whitespace {
        s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    s
}

/// Read a one-word-per-line list; blank lines and `#` comments are skipped and
/// entries are lowercased.
pub fn load_wordlist<R: BufRead>(reader: R) -> io::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        let w = line.trim();
        if w.is_empty() || w.starts_with('#') {
            continue;
        }
        out.insert(w.to_lowercase());
    }
    Ok(out)
}

/// Maximal alphanumeric runs; the word view used by profanity checks and
/// the bag-of-words embedding.
pub fn word_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

// ---------------------------------------------------------------------------
// Keep/drop filters

pub fn profanity_filter(text: &str, wordlist: &BTreeSet<String>) -> FilterVerdict {
    for tok in word_tokens(text) {
        let lower = tok.to_lowercase();
        if wordlist.contains(&lower) {
            return FilterVerdict::drop("profanity", format!("profanity:{lower}"));
        }
    }
    FilterVerdict::keep("profanity")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub min_chars: usize,
    pub max_chars: usize,
    pub max_whitespace_run: usize,
    pub max_nonprintable_ratio: f64,
    pub require_terminal_punctuation: bool,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            min_chars: 1,
            max_chars: 20_000,
            max_whitespace_run: 32,
            max_nonprintable_ratio: 0.05,
            require_terminal_punctuation: false,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.min_chars > self.max_chars {
            return Err("min_chars exceeds max_chars");
        }
        if self.max_whitespace_run < 1 {
            return Err("max_whitespace_run must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_nonprintable_ratio) {
            return Err("max_nonprintable_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

fn is_nonprintable(c: char) -> bool {
    if c == '\u{FFFD}' {
        return true;
    }
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    matches!(
        get_general_category(c),
        Gc::Control | Gc::Format | Gc::PrivateUse | Gc::Surrogate | Gc::Unassigned
    )
}

fn longest_whitespace_run(text: &str) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

const TERMINAL: [char; 6] = ['.', '!', '?', '"', '\'', ')'];

/// Structural checks; the first failing one, in a fixed order, is reported.
pub fn quality_filter(text: &str, cfg: &QualityConfig) -> FilterVerdict {
    let chars = text.chars().count();
    if chars < cfg.min_chars {
        return FilterVerdict::drop("quality", "too_short");
    }
    if chars > cfg.max_chars {
        return FilterVerdict::drop("quality", "too_long");
    }
    if longest_whitespace_run(text) > cfg.max_whitespace_run {
        return FilterVerdict::drop("quality", "whitespace_run");
    }
    if chars > 0 {
        let bad = text.chars().filter(|&c| is_nonprintable(c)).count();
        if bad as f64 / chars as f64 > cfg.max_nonprintable_ratio {
            return FilterVerdict::drop("quality", "nonprintable_ratio");
        }
    }
    if cfg.require_terminal_punctuation {
        let last = text.trim_end().chars().last();
        if !last.is_some_and(|c| TERMINAL.contains(&c)) {
            return FilterVerdict::drop("quality", "incomplete_sentence");
        }
    }
    FilterVerdict::keep("quality")
}

/// Longest token prefix with at most `max_tokens` tokens, cut at the end of
/// the last kept token.
pub fn truncate_by_length(text: &str, max_tokens: usize, tokenizer: &dyn Tokenizer) -> String {
    let spans = tokenizer.split(text);
    if spans.len() <= max_tokens {
        return text.to_string();
    }
    if max_tokens == 0 {
        return String::new();
    }
    text[..spans[max_tokens - 1].end].to_string()
}

pub fn compression_ratio(pair: &DocSummaryPair, tokenizer: &dyn Tokenizer) -> Option<f64> {
    let summary = tokenizer.count(&pair.summary);
    (summary > 0).then(|| tokenizer.count(&pair.document) as f64 / summary as f64)
}

pub fn compression_ratio_filter(
    pair: &DocSummaryPair,
    min_ratio: f64,
    max_ratio: f64,
    tokenizer: &dyn Tokenizer,
) -> FilterVerdict {
    const NAME: &str = "compression_ratio";
    let Some(ratio) = compression_ratio(pair, tokenizer) else {
        return FilterVerdict::drop(NAME, "empty_summary");
    };
    let v = if ratio < min_ratio {
        FilterVerdict::drop(NAME, "ratio_low")
    } else if ratio > max_ratio {
        FilterVerdict::drop(NAME, "ratio_high")
    } else {
        FilterVerdict::keep(NAME)
    };
    v.with_metric(ratio)
}

// ---------------------------------------------------------------------------
// Bag-of-words similarity

pub const EMBED_BUCKETS: u32 = 1 << 20;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed term-count vector. Only nonzero buckets are stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparseVector(pub BTreeMap<u32, u32>);

impl SparseVector {
    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .0
            .iter()
            .filter_map(|(k, &a)| large.0.get(k).map(|&b| f64::from(a) * f64::from(b)))
            .sum()
    }
}

pub fn embed_text(text: &str) -> SparseVector {
    let mut v = BTreeMap::new();
    for tok in word_tokens(text) {
        let bucket = (fnv1a64(tok.to_lowercase().as_bytes()) % u64::from(EMBED_BUCKETS)) as u32;
        *v.entry(bucket).or_insert(0) += 1;
    }
    SparseVector(v)
}

/// Cosine similarity, defined as 0 when either side is the zero vector.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (a.dot(b) / (a.norm() * b.norm())).clamp(0.0, 1.0)
}

pub fn qa_similarity(pair: &QaPair) -> f64 {
    cosine(&embed_text(&pair.input), &embed_text(&pair.output))
}

pub fn qa_similarity_filter(pair: &QaPair, threshold: f64) -> FilterVerdict {
    let sim = qa_similarity(pair);
    let v = if sim >= threshold {
        FilterVerdict::keep("similarity")
    } else {
        FilterVerdict::drop("similarity", "low_similarity")
    };
    v.with_metric(sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::DefaultTokenizer;

    fn words(ws: &[&str]) -> BTreeSet<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn clean_example() {
        let cfg = CleanConfig {
            strip_punctuation: true,
            case_mode: CaseMode::Lower,
            collapse_whitespace: true,
            ..CleanConfig::default()
        };
        assert_eq!(clean_text("Hello,   WORLD!!", &cfg), "hello world");
    }

    #[test]
    fn clean_identity_config() {
        let x = "  Mixed CASE, punctuation!! and\ttabs\u{1F600} ";
        assert_eq!(clean_text(x, &CleanConfig::default()), x);
    }

    #[test]
    fn clean_stopwords_and_specials() {
        let cfg = CleanConfig {
            remove_stopwords: true,
            stopword_list: words(&["the", "a"]),
            remove_special_chars: true,
            ..CleanConfig::default()
        };
        assert_eq!(clean_text("The cat \u{1F600}sat on a mat", &cfg), "cat sat on mat");
        // stopwords become visible after special-character removal
        assert_eq!(clean_text("th\u{1F600}e end", &cfg), "end");
    }

    #[test]
    fn profanity_examples() {
        let list = words(&["badword"]);
        assert!(profanity_filter("have a nice day", &list).keep);
        let v = profanity_filter("a BADWORD here", &list);
        assert!(!v.keep);
        assert_eq!(v.reason.as_deref(), Some("profanity:badword"));
        assert!(profanity_filter("scrapbook", &words(&["crap"])).keep);
        let v = profanity_filter("x, badword. crap", &words(&["crap", "badword"]));
        assert_eq!(v.reason.as_deref(), Some("profanity:badword"));
    }

    #[test]
    fn wordlist_file_format() {
        let src = "# comment\nFoo\n\n  bar  \n#baz\n";
        assert_eq!(load_wordlist(src.as_bytes()).unwrap(), words(&["foo", "bar"]));
    }

    #[test]
    fn quality_examples() {
        let cfg = QualityConfig {
            min_chars: 10,
            ..QualityConfig::default()
        };
        assert_eq!(quality_filter("short", &cfg).reason.as_deref(), Some("too_short"));

        let cfg = QualityConfig {
            max_whitespace_run: 20,
            ..QualityConfig::default()
        };
        let spaced = format!("start{}end.", " ".repeat(40));
        assert_eq!(quality_filter(&spaced, &cfg).reason.as_deref(), Some("whitespace_run"));

        let cfg = QualityConfig {
            require_terminal_punctuation: true,
            ..QualityConfig::default()
        };
        assert!(quality_filter("This sentence ends properly.", &cfg).keep);
        assert_eq!(
            quality_filter("This sentence trails off", &cfg).reason.as_deref(),
            Some("incomplete_sentence")
        );
        assert!(quality_filter("He said \"ok\"  ", &cfg).keep);
    }

    #[test]
    fn quality_precedence_and_nonprintable() {
        let cfg = QualityConfig {
            max_chars: 5,
            max_whitespace_run: 1,
            ..QualityConfig::default()
        };
        // too long and whitespace run both fail; length wins
        assert_eq!(quality_filter("a      b", &cfg).reason.as_deref(), Some("too_long"));

        let garbled = "ok\u{0}\u{0}\u{FFFD} text here";
        assert_eq!(
            quality_filter(garbled, &QualityConfig::default()).reason.as_deref(),
            Some("nonprintable_ratio")
        );
        assert!(quality_filter("line one\nline two\ttab", &QualityConfig::default()).keep);
    }

    #[test]
    fn truncate_examples() {
        let t = DefaultTokenizer;
        assert_eq!(truncate_by_length("a b c d", 2, &t), "a b");
        assert_eq!(truncate_by_length("a b", 10, &t), "a b");
        assert_eq!(truncate_by_length("anything at all", 0, &t), "");
        assert_eq!(truncate_by_length("don't stop.", 3, &t), "don't");
    }

    fn n_tokens(n: usize, w: &str) -> String {
        vec![w; n].join(" ")
    }

    #[test]
    fn compression_examples() {
        let t = DefaultTokenizer;
        let pair = DocSummaryPair {
            document: n_tokens(100, "d"),
            summary: n_tokens(10, "s"),
        };
        let v = compression_ratio_filter(&pair, 2.0, 50.0, &t);
        assert!(v.keep);
        assert_eq!(v.metric, Some(10.0));

        let pair = DocSummaryPair {
            document: n_tokens(10, "d"),
            summary: n_tokens(10, "s"),
        };
        assert_eq!(compression_ratio_filter(&pair, 2.0, 50.0, &t).reason.as_deref(), Some("ratio_low"));

        let pair = DocSummaryPair {
            document: n_tokens(200, "d"),
            summary: "s".into(),
        };
        assert_eq!(compression_ratio_filter(&pair, 2.0, 50.0, &t).reason.as_deref(), Some("ratio_high"));

        let pair = DocSummaryPair {
            document: "doc".into(),
            summary: String::new(),
        };
        assert_eq!(compression_ratio_filter(&pair, 2.0, 50.0, &t).reason.as_deref(), Some("empty_summary"));
    }

    #[test]
    fn embedding_examples() {
        assert!(embed_text("").is_zero());
        let v = embed_text("cat cat dog");
        let cat = (fnv1a64(b"cat") % u64::from(EMBED_BUCKETS)) as u32;
        let dog = (fnv1a64(b"dog") % u64::from(EMBED_BUCKETS)) as u32;
        assert_ne!(cat, dog);
        assert_eq!(v.0.len(), 2);
        assert_eq!(v.0[&cat], 2);
        assert_eq!(v.0[&dog], 1);
        assert_eq!(embed_text("Cat, CAT dog!"), v);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn similarity_examples() {
        let same = QaPair {
            input: "same text".into(),
            output: "same text".into(),
        };
        let v = qa_similarity_filter(&same, 1.0);
        assert!(v.keep);
        assert_eq!(v.metric, Some(1.0));

        let disjoint = QaPair {
            input: "alpha beta".into(),
            output: "gamma delta".into(),
        };
        let v = qa_similarity_filter(&disjoint, 0.01);
        assert!(!v.keep);
        assert_eq!(v.metric, Some(0.0));
        assert_eq!(v.reason.as_deref(), Some("low_similarity"));
    }
}
