//! Evidence-chain data model.
//!
//! An [`EvidenceDocument`] is the append-only textual record of everything
//! perceived about one audio clip. It starts from a single caption and grows
//! by one [`EvidenceItem`] per refinement iteration via [`EvidenceDocument::integrate`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("evidence content is empty")]
    EmptyEvidence,
    #[error("source {0} cannot be integrated into an existing document")]
    InvalidSource(EvidenceSource),
    #[error("item iteration {item} precedes document iteration {last}")]
    NonMonotonicIteration { item: usize, last: usize },
    #[error("{0}")]
    Invalid(String),
}

/// A reference to an audio asset. The audio itself never enters the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AudioRefRepr")]
pub struct AudioRef {
    pub uri: String,
    pub media_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Deserialize)]
struct AudioRefRepr {
    uri: String,
    #[serde(default)]
    media_type: Option<String>,
    #[serde(default)]
    duration_s: Option<f64>,
}

impl TryFrom<AudioRefRepr> for AudioRef {
    type Error = EvidenceError;

    fn try_from(r: AudioRefRepr) -> Result<Self, Self::Error> {
        AudioRef::new(r.uri, r.media_type, r.duration_s)
    }
}

impl AudioRef {
    /// Builds a reference, inferring the media type from the file extension
    /// when none is given.
    pub fn new(
        uri: impl Into<String>,
        media_type: Option<String>,
        duration_s: Option<f64>,
    ) -> Result<Self, EvidenceError> {
        let uri = uri.into();
        if uri.trim().is_empty() {
            return Err(EvidenceError::Invalid("audio uri is empty".into()));
        }
        if let Some(d) = duration_s {
            if d.is_nan() || d < 0.0 {
                return Err(EvidenceError::Invalid(format!(
                    "audio duration must be non-negative, got {d}"
                )));
            }
        }
        let media_type = media_type
            .filter(|m| !m.trim().is_empty())
            .unwrap_or_else(|| infer_media_type(&uri));
        Ok(Self {
            uri,
            media_type,
            duration_s,
        })
    }

    /// Final path segment of the uri, used as a stable short id.
    pub fn file_name(&self) -> &str {
        self.uri
            .rsplit(['/', '\\'])
            .next()
            .filter(|s| !s.is_empty())
            .unwrap_or(&self.uri)
    }
}

fn infer_media_type(uri: &str) -> String {
    let path = uri.split(['?', '#']).next().unwrap_or(uri);
    match path.rsplit_once('.') {
        Some((_, ext)) if !ext.contains('/') && !ext.is_empty() => ext.to_ascii_lowercase(),
        _ => "wav".to_string(),
    }
}

/// Options are presented as letters A..Z.
pub const MAX_CHOICES: usize = 26;

/// Letter for a 0-based option index.
pub fn option_letter(index: usize) -> char {
    assert!(index < MAX_CHOICES, "option index {index} has no letter");
    (b'A' + index as u8) as char
}

/// A multiple-choice question about an audio clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuestionRepr")]
pub struct Question {
    pub text: String,
    pub choices: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct QuestionRepr {
    text: String,
    choices: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl TryFrom<QuestionRepr> for Question {
    type Error = EvidenceError;

    fn try_from(r: QuestionRepr) -> Result<Self, Self::Error> {
        Question::new(r.text, r.choices).map(|q| q.with_metadata(r.metadata))
    }
}

impl Question {
    pub fn new(text: impl Into<String>, choices: Vec<String>) -> Result<Self, EvidenceError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EvidenceError::Invalid("question text is empty".into()));
        }
        if choices.len() < 2 {
            return Err(EvidenceError::Invalid(format!(
                "a question needs at least 2 choices, got {}",
                choices.len()
            )));
        }
        if choices.len() > MAX_CHOICES {
            return Err(EvidenceError::Invalid(format!(
                "at most {MAX_CHOICES} choices can be lettered, got {}",
                choices.len()
            )));
        }
        for (i, c) in choices.iter().enumerate() {
            let t = c.trim();
            if t.is_empty() {
                return Err(EvidenceError::Invalid(format!("choice {i} is empty")));
            }
            if choices[..i].iter().any(|p| p.trim() == t) {
                return Err(EvidenceError::Invalid(format!("duplicate choice {t:?}")));
            }
        }
        Ok(Self {
            text,
            choices,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    /// Choices as lettered lines: `A. first`, `B. second`, ...
    pub fn lettered_choices(&self) -> String {
        self.choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", option_letter(i), c.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Index of the choice equal to `answer` after trimming.
    pub fn index_of(&self, answer: &str) -> Option<usize> {
        let answer = answer.trim();
        self.choices.iter().position(|c| c.trim() == answer)
    }
}

/// Where a piece of evidence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvidenceSource {
    InitialCaption,
    AudioQA,
    GuidedRecaption,
    ASR,
}

impl EvidenceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceSource::InitialCaption => "InitialCaption",
            EvidenceSource::AudioQA => "AudioQA",
            EvidenceSource::GuidedRecaption => "GuidedRecaption",
            EvidenceSource::ASR => "ASR",
        }
    }
}

impl fmt::Display for EvidenceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub ordinal: usize,
    pub source: EvidenceSource,
    pub content: String,
    pub iteration: usize,
    #[serde(default)]
    pub provenance: String,
}

impl EvidenceItem {
    /// An item to be appended by [`EvidenceDocument::integrate`], which assigns
    /// the ordinal.
    pub fn new(
        source: EvidenceSource,
        content: impl Into<String>,
        iteration: usize,
        provenance: impl Into<String>,
    ) -> Self {
        Self {
            ordinal: 0,
            source,
            content: content.into(),
            iteration,
            provenance: provenance.into(),
        }
    }

    /// Section header used by [`EvidenceDocument::render`].
    pub fn header(&self) -> String {
        format!("[{} | {} | iter {}]", self.ordinal, self.source, self.iteration)
    }

    pub fn render(&self) -> String {
        let mut out = self.header();
        for line in self.content.split('\n') {
            out.push('\n');
            // Content lines that could be mistaken for a header are escaped.
            if line.starts_with('[') || line.starts_with('\\') {
                out.push('\\');
            }
            out.push_str(line);
        }
        out
    }
}

/// Separator between rendered sections.
pub const SECTION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRepr")]
pub struct EvidenceDocument {
    items: Vec<EvidenceItem>,
}

#[derive(Deserialize)]
struct DocumentRepr {
    items: Vec<EvidenceItem>,
}

impl TryFrom<DocumentRepr> for EvidenceDocument {
    type Error = EvidenceError;

    fn try_from(r: DocumentRepr) -> Result<Self, Self::Error> {
        let mut items = r.items.into_iter();
        let first = items
            .next()
            .ok_or_else(|| EvidenceError::Invalid("document has no items".into()))?;
        if first.source != EvidenceSource::InitialCaption || first.ordinal != 0 || first.iteration != 0 {
            return Err(EvidenceError::Invalid(
                "first item must be the iteration-0 initial caption".into(),
            ));
        }
        let mut doc = EvidenceDocument::new(first.content.clone())?;
        if doc.items[0] != first {
            return Err(EvidenceError::Invalid("initial caption is not normalized".into()));
        }
        for item in items {
            if item.ordinal != doc.len() {
                return Err(EvidenceError::Invalid(format!(
                    "item ordinal {} out of sequence (expected {})",
                    item.ordinal,
                    doc.len()
                )));
            }
            doc = doc.integrate(item)?;
        }
        Ok(doc)
    }
}

impl EvidenceDocument {
    /// Starts a document from the initial caption. The caption is kept as given.
    pub fn new(caption: impl Into<String>) -> Result<Self, EvidenceError> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(EvidenceError::EmptyCaption);
        }
        Ok(Self {
            items: vec![EvidenceItem {
                ordinal: 0,
                source: EvidenceSource::InitialCaption,
                content: caption,
                iteration: 0,
                provenance: String::new(),
            }],
        })
    }

    /// Returns a copy of this document with `item` appended at ordinal `len()`.
    pub fn integrate(&self, mut item: EvidenceItem) -> Result<Self, EvidenceError> {
        if item.source == EvidenceSource::InitialCaption {
            return Err(EvidenceError::InvalidSource(item.source));
        }
        if item.content.trim().is_empty() {
            return Err(EvidenceError::EmptyEvidence);
        }
        if item.iteration == 0 {
            return Err(EvidenceError::Invalid(
                "iteration 0 is reserved for the initial caption".into(),
            ));
        }
        let last = self.last().iteration;
        if item.iteration < last {
            return Err(EvidenceError::NonMonotonicIteration {
                item: item.iteration,
                last,
            });
        }
        item.ordinal = self.items.len();
        let mut items = Vec::with_capacity(self.items.len() + 1);
        items.extend_from_slice(&self.items);
        items.push(item);
        Ok(Self { items })
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Always false; a document holds at least its caption.
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn caption(&self) -> &str {
        &self.items[0].content
    }

    pub fn last(&self) -> &EvidenceItem {
        self.items.last().expect("document is never empty")
    }

    /// True when `self` is `other` followed by zero or more items.
    pub fn extends(&self, other: &EvidenceDocument) -> bool {
        self.items.len() >= other.items.len() && self.items[..other.items.len()] == other.items[..]
    }

    /// Canonical text form handed to agents.
    pub fn render(&self) -> String {
        self.items
            .iter()
            .map(EvidenceItem::render)
            .collect::<Vec<_>>()
            .join(SECTION_SEPARATOR)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub gap_analysis: String,
}

/// Gap analyses produced by the planning agent, in loop order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HistoryRepr")]
pub struct AnalysisHistory {
    entries: Vec<HistoryEntry>,
}

#[derive(Deserialize)]
struct HistoryRepr {
    entries: Vec<HistoryEntry>,
}

impl TryFrom<HistoryRepr> for AnalysisHistory {
    type Error = EvidenceError;

    fn try_from(r: HistoryRepr) -> Result<Self, Self::Error> {
        r.entries
            .into_iter()
            .try_fold(AnalysisHistory::new(), |h, e| h.append(e.iteration, e.gap_analysis))
    }
}

impl AnalysisHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, iteration: usize, gap_analysis: impl Into<String>) -> Result<Self, EvidenceError> {
        let gap_analysis = gap_analysis.into();
        if gap_analysis.trim().is_empty() {
            return Err(EvidenceError::Invalid("gap analysis is empty".into()));
        }
        if let Some(last) = self.entries.last() {
            if iteration <= last.iteration {
                return Err(EvidenceError::Invalid(format!(
                    "history iteration {iteration} does not follow {}",
                    last.iteration
                )));
            }
        }
        let mut entries = self.entries.clone();
        entries.push(HistoryEntry {
            iteration,
            gap_analysis,
        });
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "(none)".to_string();
        }
        self.entries
            .iter()
            .map(|e| format!("- iteration {}: {}", e.iteration, e.gap_analysis.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
