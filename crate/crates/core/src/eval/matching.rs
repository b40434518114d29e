//! Mapping free-form model output onto a choice index.
//!
//! [`CascadeMatcher`] is the default. Alternative strategies implement
//! [`AnswerMatcher`] and are selected by name through [`MatcherRegistry`].

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use regex::Regex;

pub trait AnswerMatcher: Send + Sync {
    fn name(&self) -> &str;

    /// A choice index, or `None` when nothing matches or the match is ambiguous.
    fn match_answer(&self, raw: &str, choices: &[String]) -> Option<usize>;
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(['.', '!', '?'])
        .trim()
        .to_lowercase()
}

fn unique<I: IntoIterator<Item = usize>>(it: I) -> Option<usize> {
    let mut it = it.into_iter();
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

/// Stage 1: the whole reply equals one choice, ignoring case, spacing and
/// trailing punctuation.
fn exact(raw: &str, choices: &[String]) -> Option<usize> {
    let raw = normalize(raw);
    if raw.is_empty() {
        return None;
    }
    unique(
        choices
            .iter()
            .enumerate()
            .filter(|(_, c)| normalize(c) == raw)
            .map(|(i, _)| i),
    )
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte spans where `needle` occurs in `hay` bounded by non-word characters.
fn phrase_spans(hay: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return Vec::new();
    }
    hay.match_indices(needle)
        .filter(|(start, m)| {
            let end = start + m.len();
            let before = hay[..*start].chars().next_back();
            let after = hay[end..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
        .map(|(start, m)| (start, start + m.len()))
        .collect()
}

/// Stage 2: exactly one choice appears in the reply as a whole phrase. A
/// choice seen only inside a longer matched choice ("jazz" within
/// "jazz fusion") does not count.
fn contained(raw: &str, choices: &[String]) -> Option<usize> {
    let hay = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let spans: Vec<(usize, Vec<(usize, usize)>)> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| (i, phrase_spans(&hay, &normalize(c))))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    let dominated = |i: usize, own: &[(usize, usize)]| {
        own.iter().all(|&(s, e)| {
            spans
                .iter()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, other)| other.iter())
                .any(|&(os, oe)| os <= s && e <= oe && (oe - os) > (e - s))
        })
    };
    unique(spans.iter().filter(|(i, own)| !dominated(*i, own)).map(|(i, _)| *i))
}

static LETTER_PATTERNS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        // "The final answer is C", "Answer: (b)", "option D."
        r"(?i:answer|option|choice)\s*(?i:is)?\s*[:\-]?\s*\(?([A-Za-z])\)?\s*[.!]?\s*$",
        // "... (C)"
        r"\(([A-Z])\)\s*[.!]?\s*$",
        // "... C." or a bare "C"
        r"(?:^|[\s:])([A-Z])\s*[.)]?\s*$",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("valid pattern"))
    .collect()
});

/// Stage 3: an option letter at the end of the reply.
fn trailing_letter(raw: &str, choices: &[String]) -> Option<usize> {
    let raw = raw.trim();
    LETTER_PATTERNS.iter().find_map(|re| {
        let c = re.captures(raw)?.get(1)?.as_str().chars().next()?;
        let idx = (c.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
        (idx < choices.len()).then_some(idx)
    })
}

/// Exact match, then unique whole-phrase containment, then a trailing option
/// letter. Ambiguity yields `None`; the cascade never guesses.
#[derive(Debug, Clone, Copy, Default)]
pub struct CascadeMatcher;

impl AnswerMatcher for CascadeMatcher {
    fn name(&self) -> &str {
        "cascade"
    }

    fn match_answer(&self, raw: &str, choices: &[String]) -> Option<usize> {
        exact(raw, choices)
            .or_else(|| contained(raw, choices))
            .or_else(|| trailing_letter(raw, choices))
    }
}

/// Only whole-reply equality.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatcher;

impl AnswerMatcher for ExactMatcher {
    fn name(&self) -> &str {
        "exact"
    }

    fn match_answer(&self, raw: &str, choices: &[String]) -> Option<usize> {
        exact(raw, choices)
    }
}

/// Only trailing option letters.
#[derive(Debug, Clone, Copy, Default)]
pub struct LetterMatcher;

impl AnswerMatcher for LetterMatcher {
    fn name(&self) -> &str {
        "letter"
    }

    fn match_answer(&self, raw: &str, choices: &[String]) -> Option<usize> {
        trailing_letter(raw, choices)
    }
}

/// The default cascade.
pub fn match_answer(raw: &str, choices: &[String]) -> Option<usize> {
    CascadeMatcher.match_answer(raw, choices)
}

#[derive(Clone)]
pub struct MatcherRegistry {
    matchers: BTreeMap<String, Arc<dyn AnswerMatcher>>,
}

impl Default for MatcherRegistry {
    fn default() -> Self {
        let mut reg = Self {
            matchers: BTreeMap::new(),
        };
        reg.register(Arc::new(CascadeMatcher));
        reg.register(Arc::new(ExactMatcher));
        reg.register(Arc::new(LetterMatcher));
        reg
    }
}

impl MatcherRegistry {
    pub const DEFAULT: &'static str = "cascade";

    pub fn register(&mut self, matcher: Arc<dyn AnswerMatcher>) -> &mut Self {
        self.matchers.insert(matcher.name().to_string(), matcher);
        self
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn AnswerMatcher>> {
        self.matchers.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.matchers.keys().map(String::as_str).collect()
    }
}
