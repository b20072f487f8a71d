//! Tokenization and context-length budgeting.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConversationPath, Message};
use crate::filters::truncate_by_length;
use crate::prompts::{format_conversation, PromptError, PromptScheme};

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("cannot_fit: final exchange needs {needed} tokens, budget is {budget}")]
    CannotFit { needed: usize, budget: usize },
    #[error("pad_not_single_token: pad symbol {0:?} does not count as exactly one token")]
    PadNotSingleToken(String),
    #[error("invalid_budget: context_tokens must be at least 1")]
    InvalidBudget,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl BudgetError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::CannotFit { .. } => "cannot_fit",
            Self::PadNotSingleToken(_) => "pad_not_single_token",
            Self::InvalidBudget => "invalid_budget",
            Self::Prompt(e) => e.code(),
        }
    }
}

/// Byte range of one token within the text it was split from.
pub type Span = Range<usize>;

/// Splits text into tokens with byte offsets. Offsets are ascending,
/// non-overlapping, fall on char boundaries, and cutting the text at the end
/// of the k-th token yields a text of exactly k tokens.
pub trait Tokenizer: Send + Sync {
    fn split(&self, text: &str) -> Vec<Span>;

    fn count(&self, text: &str) -> usize {
        self.split(text).len()
    }
}

/// Whitespace-delimited runs, further split so that each run of alphanumeric
/// characters is one token and every other character is its own token.
/// Angle-bracket markers such as `<pad>` or `</s>` stay whole.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

fn is_marker_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '|'
}

/// Length in bytes of a `<name>` or `</name>` marker at the start of `s`.
fn marker_len(s: &str) -> Option<usize> {
    let rest = s.strip_prefix('<')?;
    let body = rest.strip_prefix('/').unwrap_or(rest);
    let name_len: usize = body
        .chars()
        .take_while(|&c| is_marker_char(c))
        .map(char::len_utf8)
        .sum();
    if name_len == 0 || !body[name_len..].starts_with('>') {
        return None;
    }
    Some(s.len() - body.len() + name_len + 1)
}

impl Tokenizer for DefaultTokenizer {
    fn split(&self, text: &str) -> Vec<Span> {
        let mut out = Vec::new();
        let mut it = text.char_indices().peekable();
        while let Some((i, c)) = it.next() {
            if c.is_whitespace() {
                continue;
            }
            if c == '<' {
                if let Some(len) = marker_len(&text[i..]) {
                    out.push(i..i + len);
                    while it.peek().is_some_and(|&(j, _)| j < i + len) {
                        it.next();
                    }
                    continue;
                }
            }
            if c.is_alphanumeric() {
                let mut end = i + c.len_utf8();
                while let Some(&(j, d)) = it.peek() {
                    if !d.is_alphanumeric() {
                        break;
                    }
                    end = j + d.len_utf8();
                    it.next();
                }
                out.push(i..end);
            } else {
                out.push(i..i + c.len_utf8());
            }
        }
        out
    }
}

/// Coarse estimator: one token per four bytes, rounded up. Token boundaries
/// are moved back to the nearest char boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bytes4Tokenizer;

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    if i >= s.len() {
        return s.len();
    }
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

impl Tokenizer for Bytes4Tokenizer {
    fn split(&self, text: &str) -> Vec<Span> {
        let n = text.len().div_ceil(4);
        (0..n)
            .map(|k| floor_char_boundary(text, 4 * k)..floor_char_boundary(text, 4 * (k + 1)))
            .collect()
    }

    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Default,
    Bytes4,
}

impl TokenizerKind {
    pub fn tokenizer(self) -> &'static dyn Tokenizer {
        match self {
            TokenizerKind::Default => &DefaultTokenizer,
            TokenizerKind::Bytes4 => &Bytes4Tokenizer,
        }
    }
}

/// The token strings of `text` under the default tokenizer.
pub fn default_tokenize(text: &str) -> Vec<(&str, Span)> {
    DefaultTokenizer
        .split(text)
        .into_iter()
        .map(|s| (&text[s.clone()], s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub context_tokens: usize,
    pub pad_symbol: String,
    pub pad_to_max: bool,
    pub tokenizer: TokenizerKind,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            context_tokens: 2048,
            pad_symbol: "<pad>".into(),
            pad_to_max: false,
            tokenizer: TokenizerKind::Default,
        }
    }
}

impl BudgetConfig {
    /// Padding only reaches the budget exactly when each appended
    /// `" " + pad_symbol` unit adds exactly one token.
    pub fn validate(&self, tokenizer: &dyn Tokenizer) -> Result<(), BudgetError> {
        if self.context_tokens == 0 {
            return Err(BudgetError::InvalidBudget);
        }
        if self.pad_to_max {
            let unit = format!(" {}", self.pad_symbol);
            if tokenizer.count(&self.pad_symbol) != 1 || tokenizer.count(&unit) != 1 {
                return Err(BudgetError::PadNotSingleToken(self.pad_symbol.clone()));
            }
        }
        Ok(())
    }
}

/// Append pad symbols, space separated, until the text has `context_tokens`
/// tokens. Returns the padded text and the number of pads added.
pub fn pad_sequence(text: &str, cfg: &BudgetConfig, tokenizer: &dyn Tokenizer) -> (String, usize) {
    if !cfg.pad_to_max {
        return (text.to_string(), 0);
    }
    let have = tokenizer.count(text);
    if have >= cfg.context_tokens {
        return (text.to_string(), 0);
    }
    let pads = cfg.context_tokens - have;
    let mut out = String::with_capacity(text.len() + pads * (cfg.pad_symbol.len() + 1));
    out.push_str(text);
    for i in 0..pads {
        if i > 0 || !text.is_empty() {
            out.push(' ');
        }
        out.push_str(&cfg.pad_symbol);
    }
    (out, pads)
}

/// Truncate to the context budget, then pad when configured.
pub fn fit_to_context(text: &str, cfg: &BudgetConfig, tokenizer: &dyn Tokenizer) -> String {
    let cut = truncate_by_length(text, cfg.context_tokens, tokenizer);
    pad_sequence(&cut, cfg, tokenizer).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTruncation {
    pub path: ConversationPath,
    /// Original exchange indices, in the order they were removed.
    pub removed: Vec<usize>,
}

/// Exchange score: the smaller of its two turn scores; missing scores count as 0.
pub fn exchange_score(human: &Message, bot: &Message) -> f64 {
    human.turn_score.unwrap_or(0.0).min(bot.turn_score.unwrap_or(0.0))
}

/// Drop whole exchanges, lowest score first (earliest on ties), until the
/// formatted conversation fits `budget_tokens`. The final exchange is kept.
pub fn truncate_by_score(
    path: &ConversationPath,
    budget_tokens: usize,
    scheme: &PromptScheme,
    tokenizer: &dyn Tokenizer,
) -> Result<ScoreTruncation, BudgetError> {
    let exchanges: Vec<(&Message, &Message)> = path.exchanges().collect();
    let last = exchanges.len() - 1;
    let mut kept: Vec<usize> = (0..exchanges.len()).collect();
    let mut removed = Vec::new();

    let render = |kept: &[usize]| -> Result<(ConversationPath, usize), BudgetError> {
        let p = ConversationPath::from_exchanges(
            kept.iter().map(|&i| (exchanges[i].0.clone(), exchanges[i].1.clone())),
        )
        .expect("subsequence of whole exchanges stays valid");
        let n = tokenizer.count(&format_conversation(&p, scheme)?);
        Ok((p, n))
    };

    loop {
        let (p, n) = render(&kept)?;
        if n <= budget_tokens {
            return Ok(ScoreTruncation { path: p, removed });
        }
        if kept.len() == 1 {
            return Err(BudgetError::CannotFit {
                needed: n,
                budget: budget_tokens,
            });
        }
        let (pos, _) = kept
            .iter()
            .enumerate()
            .filter(|(_, &i)| i != last)
            .map(|(pos, &i)| (pos, exchange_score(exchanges[i].0, exchanges[i].1)))
            .fold(None, |best: Option<(usize, f64)>, (pos, s)| match best {
                Some((_, bs)) if bs <= s => best,
                _ => Some((pos, s)),
            })
            .expect("at least one removable exchange");
        removed.push(kept.remove(pos));
    }
}
