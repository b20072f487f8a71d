//! Training-text formatting with role markers and a trailing terminator.
//!
//! A conversation `[h1, b1, h2, b2]` under the default scheme renders as
//!
//! ```text
//! <human>: h1 <bot>: b1 <human>: h2 <bot>: b2 <human>:
//! ```
//!
//! The trailing human marker tells the model the last bot turn is complete.
//! Message bodies may not contain a marker; such input is refused rather than
//! escaped, which keeps [`parse_formatted`] an exact inverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::Tokenizer;
use crate::corpus::{ConversationPath, Message, Role};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid_path: messages must alternate human/bot and end with a bot turn")]
    InvalidPath,
    #[error("marker_in_body: message {index} contains a role marker")]
    MarkerInBody { index: usize },
    #[error("unterminated: text does not end with the terminator")]
    Unterminated,
    #[error("unanswered_turn: final human turn has no bot reply")]
    UnansweredTurn,
    #[error("ambiguous_markers: a recovered message contains a role marker")]
    AmbiguousMarkers,
    #[error("prompt_too_large: new prompt needs {needed} tokens, budget is {budget}")]
    PromptTooLarge { needed: usize, budget: usize },
    #[error("invalid_scheme: {0}")]
    InvalidScheme(&'static str),
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidPath => "invalid_path",
            Self::MarkerInBody { .. } => "marker_in_body",
            Self::Unterminated => "unterminated",
            Self::UnansweredTurn => "unanswered_turn",
            Self::AmbiguousMarkers => "ambiguous_markers",
            Self::PromptTooLarge { .. } => "prompt_too_large",
            Self::InvalidScheme(_) => "invalid_scheme",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptScheme {
    pub human_prefix: String,
    pub bot_prefix: String,
    #[serde(rename = "separator")]
    pub turn_separator: String,
    pub terminator: String,
}

impl Default for PromptScheme {
    fn default() -> Self {
        Self {
            human_prefix: "<human>: ".into(),
            bot_prefix: "<bot>: ".into(),
            turn_separator: " ".into(),
            terminator: "<human>:".into(),
        }
    }
}

impl PromptScheme {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.human_prefix.is_empty() || self.bot_prefix.is_empty() {
            return Err(PromptError::InvalidScheme("empty prefix"));
        }
        if self.human_prefix.contains(&self.bot_prefix)
            || self.bot_prefix.contains(&self.human_prefix)
        {
            return Err(PromptError::InvalidScheme("one prefix contains the other"));
        }
        if self.terminator.is_empty() {
            return Err(PromptError::InvalidScheme("empty terminator"));
        }
        Ok(())
    }

    fn prefix(&self, role: Role) -> &str {
        match role {
            Role::Human => &self.human_prefix,
            Role::Bot => &self.bot_prefix,
        }
    }

    /// Strings no message body may contain: both prefixes, their
    /// trailing-whitespace-trimmed forms, and the terminator.
    fn markers(&self) -> [&str; 5] {
        [
            &self.human_prefix,
            &self.bot_prefix,
            self.human_prefix.trim_end(),
            self.bot_prefix.trim_end(),
            &self.terminator,
        ]
    }

    pub fn body_has_marker(&self, body: &str) -> bool {
        self.markers()
            .iter()
            .any(|m| !m.is_empty() && body.contains(m))
    }
}

fn check_bodies<'a>(
    scheme: &PromptScheme,
    bodies: impl IntoIterator<Item = &'a str>,
) -> Result<(), PromptError> {
    for (index, b) in bodies.into_iter().enumerate() {
        if scheme.body_has_marker(b) {
            return Err(PromptError::MarkerInBody { index });
        }
    }
    Ok(())
}

fn push_turns<'a>(out: &mut String, scheme: &PromptScheme, turns: impl IntoIterator<Item = (Role, &'a str)>) {
    for (role, text) in turns {
        if !out.is_empty() {
            out.push_str(&scheme.turn_separator);
        }
        out.push_str(scheme.prefix(role));
        out.push_str(text);
    }
}

fn finish(mut out: String, scheme: &PromptScheme) -> String {
    out.push_str(&scheme.turn_separator);
    out.push_str(&scheme.terminator);
    out
}

/// Render a conversation as training text ending with the terminator.
pub fn format_conversation(path: &ConversationPath, scheme: &PromptScheme) -> Result<String, PromptError> {
    format_messages(path.messages(), scheme)
}

/// Like [`format_conversation`] but over a raw message list, which is checked
/// for alternation first.
pub fn format_messages(messages: &[Message], scheme: &PromptScheme) -> Result<String, PromptError> {
    scheme.validate()?;
    let valid = !messages.is_empty()
        && messages
            .iter()
            .enumerate()
            .all(|(i, m)| m.role == if i % 2 == 0 { Role::Human } else { Role::Bot })
        && messages.len() % 2 == 0;
    if !valid {
        return Err(PromptError::InvalidPath);
    }
    check_bodies(scheme, messages.iter().map(|m| m.text.as_str()))?;
    let mut out = String::new();
    push_turns(&mut out, scheme, messages.iter().map(|m| (m.role, m.text.as_str())));
    Ok(finish(out, scheme))
}

/// Invert [`format_conversation`]. Turn scores are not part of the text and
/// come back as `None`.
pub fn parse_formatted(text: &str, scheme: &PromptScheme) -> Result<ConversationPath, PromptError> {
    scheme.validate()?;
    let tail = format!("{}{}", scheme.turn_separator, scheme.terminator);
    let body = text.strip_suffix(tail.as_str()).ok_or(PromptError::Unterminated)?;
    let mut rest = body
        .strip_prefix(scheme.human_prefix.as_str())
        .ok_or(PromptError::InvalidPath)?;

    let mut messages = Vec::new();
    let mut role = Role::Human;
    loop {
        let next = role.other();
        let boundary = format!("{}{}", scheme.turn_separator, scheme.prefix(next));
        match rest.find(boundary.as_str()) {
            Some(at) => {
                messages.push(Message {
                    role,
                    text: rest[..at].to_string(),
                    turn_score: None,
                });
                rest = &rest[at + boundary.len()..];
                role = next;
            }
            None => {
                messages.push(Message {
                    role,
                    text: rest.to_string(),
                    turn_score: None,
                });
                break;
            }
        }
    }
    if messages.iter().any(|m| scheme.body_has_marker(&m.text)) {
        return Err(PromptError::AmbiguousMarkers);
    }
    if role == Role::Human {
        return Err(PromptError::UnansweredTurn);
    }
    ConversationPath::new(messages).map_err(|_| PromptError::InvalidPath)
}

/// Build generation context: prior exchanges, then the new human turn, then
/// the terminator. Whole oldest exchanges are dropped until the result fits.
pub fn assemble_context(
    history: &[(Message, Message)],
    new_prompt: &str,
    scheme: &PromptScheme,
    budget_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledContext, PromptError> {
    scheme.validate()?;
    check_bodies(
        scheme,
        history
            .iter()
            .flat_map(|(h, b)| [h.text.as_str(), b.text.as_str()])
            .chain(std::iter::once(new_prompt)),
    )?;
    let render = |from: usize| {
        let mut out = String::new();
        push_turns(
            &mut out,
            scheme,
            history[from..]
                .iter()
                .flat_map(|(h, b)| [(Role::Human, h.text.as_str()), (Role::Bot, b.text.as_str())])
                .chain(std::iter::once((Role::Human, new_prompt))),
        );
        finish(out, scheme)
    };
    for dropped in 0..=history.len() {
        let text = render(dropped);
        let n = tokenizer.count(&text);
        if n <= budget_tokens {
            return Ok(AssembledContext { text, dropped });
        }
        if dropped == history.len() {
            return Err(PromptError::PromptTooLarge {
                needed: n,
                budget: budget_tokens,
            });
        }
    }
    unreachable!("loop returns on the last iteration")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledContext {
    pub text: String,
    /// Number of oldest exchanges left out.
    pub dropped: usize,
}

/// Wrap text in start/end boundary markers.
pub fn mark_boundaries(text: &str, start: &str, end: &str) -> String {
    let mut out = String::with_capacity(start.len() + text.len() + end.len());
    out.push_str(start);
    out.push_str(text);
    out.push_str(end);
    out
}
