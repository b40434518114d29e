//! Prompt templates with `{placeholder}` substitution.
//!
//! Every agent prompt is a [`PromptTemplate`] with an optional system part and
//! a user part. Built-in defaults live in `prompts/` next to this crate and
//! are compiled in; a directory of overrides can replace any of them. Files are
//! named `<template>.system.txt` and `<template>.user.txt`. Write `{{` and `}}`
//! for literal braces.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} is not bound")]
    Unbound { template: String, name: String },
    #[error("template {template}: {detail}")]
    Syntax { template: String, detail: String },
    #[error("prompt directory {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// A parsed template body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateText {
    source: String,
    segments: Vec<Segment>,
}

impl TemplateText {
    pub fn parse(template: &str, text: &str, allowed: &[&str]) -> Result<Self, PromptError> {
        let syntax = |detail: String| PromptError::Syntax {
            template: template.into(),
            detail,
        };
        let mut segments = Vec::new();
        let mut buf = String::new();
        let mut chars = text.char_indices().peekable();
        while let Some((pos, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    buf.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    buf.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((_, ch)) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            _ => return Err(syntax(format!("unterminated placeholder at byte {pos}"))),
                        }
                    }
                    if !allowed.contains(&name.as_str()) {
                        return Err(PromptError::UnknownPlaceholder {
                            template: template.into(),
                            name,
                        });
                    }
                    if !buf.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut buf)));
                    }
                    segments.push(Segment::Slot(name));
                }
                '}' => return Err(syntax(format!("stray '}}' at byte {pos}"))),
                _ => buf.push(c),
            }
        }
        if !buf.is_empty() {
            segments.push(Segment::Text(buf));
        }
        Ok(Self {
            source: text.to_string(),
            segments,
        })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Text(_) => None,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn render(&self, template: &str, vars: &Bindings) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.source.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => out.push_str(vars.get(name).ok_or_else(|| PromptError::Unbound {
                    template: template.into(),
                    name: name.clone(),
                })?),
            }
        }
        Ok(out)
    }
}

/// Placeholder values for one render.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub system: Option<TemplateText>,
    pub user: TemplateText,
}

/// A rendered template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

impl PromptTemplate {
    pub fn render(&self, vars: &Bindings) -> Result<RenderedPrompt, PromptError> {
        Ok(RenderedPrompt {
            system: self.system.as_ref().map(|s| s.render(&self.name, vars)).transpose()?,
            user: self.user.render(&self.name, vars)?,
        })
    }
}

/// Template names with their permitted placeholders.
pub const TEMPLATE_SLOTS: &[(&str, &[&str])] = &[
    ("caption", &[]),
    ("recaption", &["focus"]),
    ("audio_qa", &["query"]),
    (
        "plan",
        &[
            "question",
            "choices",
            "document",
            "history",
            "iteration",
            "max_iterations",
        ],
    ),
    ("interact", &["document", "history", "latest_gap"]),
    ("answer", &["question", "choices", "document", "history_section"]),
    ("normalize", &["raw", "choices"]),
    ("reask", &["error", "format"]),
];

const BUILTIN: &[(&str, Option<&str>, &str)] = &[
    ("caption", None, include_str!("../prompts/caption.user.txt")),
    ("recaption", None, include_str!("../prompts/recaption.user.txt")),
    ("audio_qa", None, include_str!("../prompts/audio_qa.user.txt")),
    (
        "plan",
        Some(include_str!("../prompts/plan.system.txt")),
        include_str!("../prompts/plan.user.txt"),
    ),
    (
        "interact",
        Some(include_str!("../prompts/interact.system.txt")),
        include_str!("../prompts/interact.user.txt"),
    ),
    (
        "answer",
        Some(include_str!("../prompts/answer.system.txt")),
        include_str!("../prompts/answer.user.txt"),
    ),
    (
        "normalize",
        Some(include_str!("../prompts/normalize.system.txt")),
        include_str!("../prompts/normalize.user.txt"),
    ),
    ("reask", None, include_str!("../prompts/reask.user.txt")),
];

fn slots(name: &str) -> &'static [&'static str] {
    TEMPLATE_SLOTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .unwrap_or(&[])
}

/// The full set of templates used by the agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, system, user)| {
                let allowed = slots(name);
                let t = PromptTemplate {
                    name: name.to_string(),
                    system: system.map(|s| TemplateText::parse(name, s.trim_end(), allowed).expect("builtin template")),
                    user: TemplateText::parse(name, user.trim_end(), allowed).expect("builtin template"),
                };
                (name.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by whichever `<name>.system.txt` /
    /// `<name>.user.txt` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let io = |detail: String| PromptError::Io {
            path: dir.display().to_string(),
            detail,
        };
        if !dir.is_dir() {
            return Err(io("not a directory".into()));
        }
        let mut set = Self::builtin();
        for (name, allowed) in TEMPLATE_SLOTS {
            let t = set.templates.get_mut(*name).expect("builtin present");
            let sys = dir.join(format!("{name}.system.txt"));
            if sys.exists() {
                let text = std::fs::read_to_string(&sys).map_err(|e| io(format!("{}: {e}", sys.display())))?;
                t.system = Some(TemplateText::parse(name, text.trim_end(), allowed)?);
            }
            let user = dir.join(format!("{name}.user.txt"));
            if user.exists() {
                let text = std::fs::read_to_string(&user).map_err(|e| io(format!("{}: {e}", user.display())))?;
                t.user = TemplateText::parse(name, text.trim_end(), allowed)?;
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &PromptTemplate {
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("no template named {name}"))
    }

    pub fn render(&self, name: &str, vars: &Bindings) -> Result<RenderedPrompt, PromptError> {
        self.get(name).render(vars)
    }
}
