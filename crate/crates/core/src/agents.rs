//! The five agents of the refinement loop: captioning, planning, interaction,
//! augmentation and answering.
//!
//! Each agent renders a prompt template, calls a backend and, for the LLM
//! agents, parses a strict JSON object from the reply. A reply that does not
//! parse is answered with a re-ask message, at most [`AgentSettings::reask_limit`]
//! times.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{BackendCallRecord, BackendError, CallScope, ChatRequest, Message, ModelClient};
use crate::evidence::{
    option_letter, AnalysisHistory, AudioRef, EvidenceDocument, EvidenceItem, EvidenceSource, Question,
};
use crate::prompts::{Bindings, PromptError, PromptSet, RenderedPrompt};

/// Evidence text recorded when a transcript comes back empty.
pub const NO_SPEECH_SENTINEL: &str = "(no speech detected)";

/// Evidence text recorded when a tool call fails.
pub fn tool_failure_sentinel(capability: &str) -> String {
    format!("(tool failed: {capability})")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("planning output unparseable after {attempts} attempt(s): {last_error}")]
    PlanParseFailure { attempts: u32, last_error: String },
    #[error("interaction output unparseable after {attempts} attempt(s): {last_error}")]
    InteractParseFailure { attempts: u32, last_error: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sufficiency {
    Sufficient,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyVerdict {
    pub status: Sufficiency,
    /// Present only for insufficient verdicts.
    pub gap_analysis: String,
}

impl SufficiencyVerdict {
    pub fn sufficient() -> Self {
        Self {
            status: Sufficiency::Sufficient,
            gap_analysis: String::new(),
        }
    }

    pub fn insufficient(gap: impl Into<String>) -> Result<Self, String> {
        let gap = gap.into();
        if gap.trim().is_empty() {
            return Err("an insufficient verdict needs a non-empty gap_analysis".into());
        }
        Ok(Self {
            status: Sufficiency::Insufficient,
            gap_analysis: gap.trim().to_string(),
        })
    }

    pub fn is_sufficient(&self) -> bool {
        self.status == Sufficiency::Sufficient
    }
}

/// Time range in seconds within the clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, String> {
        if !(start_s.is_finite() && end_s.is_finite() && 0.0 <= start_s && start_s < end_s) {
            return Err(format!("segment [{start_s}, {end_s}] must satisfy 0 <= start < end"));
        }
        Ok(Self { start_s, end_s })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ToolAction {
    AudioQA { query: String },
    GuidedRecaption { focus: String },
    ASR { segment: Option<Segment> },
}

impl ToolAction {
    pub fn source(&self) -> EvidenceSource {
        match self {
            ToolAction::AudioQA { .. } => EvidenceSource::AudioQA,
            ToolAction::GuidedRecaption { .. } => EvidenceSource::GuidedRecaption,
            ToolAction::ASR { .. } => EvidenceSource::ASR,
        }
    }

    pub fn capability(&self) -> &'static str {
        match self {
            ToolAction::AudioQA { .. } => "audio_qa",
            ToolAction::GuidedRecaption { .. } => "audio_caption",
            ToolAction::ASR { .. } => "transcribe",
        }
    }

    /// The request as recorded on the produced evidence item.
    pub fn provenance(&self) -> String {
        match self {
            ToolAction::AudioQA { query } => format!("query: {query}"),
            ToolAction::GuidedRecaption { focus } => format!("focus: {focus}"),
            ToolAction::ASR { segment: None } => "segment: full clip".to_string(),
            ToolAction::ASR { segment: Some(s) } => format!("segment: {:.2}-{:.2}s", s.start_s, s.end_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub action: ToolAction,
    pub rationale: String,
}

impl AugmentationPlan {
    /// Used when the interaction agent's output cannot be parsed.
    pub fn fallback() -> Self {
        Self {
            action: ToolAction::ASR { segment: None },
            rationale: "fallback: interaction output was unusable, defaulting to transcription".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub selected_index: usize,
    pub confidence: f64,
    pub rationale: String,
    pub degraded: bool,
}

impl FinalAnswer {
    /// The first option, confidence 0, flagged degraded.
    pub fn fallback(reason: impl Into<String>) -> Self {
        Self {
            selected_index: 0,
            confidence: 0.0,
            rationale: reason.into(),
            degraded: true,
        }
    }

    pub fn letter(&self) -> char {
        option_letter(self.selected_index)
    }

    /// Free-text form of the answer handed to the scorer.
    pub fn statement(&self, q: &Question) -> String {
        format!(
            "{}\nThe final answer is {}",
            q.choices[self.selected_index].trim(),
            self.letter()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub plan_temperature: f64,
    pub interact_temperature: f64,
    pub answer_temperature: f64,
    pub normalize_temperature: f64,
    pub max_tokens: u32,
    pub reask_limit: u32,
    /// Show the gap-analysis history to the answering agent.
    pub answer_sees_history: bool,
    /// Keep a gap analysis the planner attaches to a sufficient verdict.
    pub record_sufficient_analysis: bool,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            plan_temperature: crate::backend::DEFAULT_TEMPERATURE,
            interact_temperature: crate::backend::DEFAULT_TEMPERATURE,
            answer_temperature: crate::backend::DEFAULT_TEMPERATURE,
            normalize_temperature: 0.0,
            max_tokens: 1024,
            reask_limit: 2,
            answer_sees_history: false,
            record_sufficient_analysis: false,
        }
    }
}

/// Returns the first JSON object embedded in `text`, tolerating code fences
/// and surrounding prose.
pub fn extract_json_object(text: &str) -> Result<Map<String, Value>, String> {
    for (pos, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Ok(map);
        }
    }
    Err("reply contains no JSON object".to_string())
}

fn str_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

pub fn parse_verdict(reply: &str) -> Result<SufficiencyVerdict, String> {
    let obj = extract_json_object(reply)?;
    let status = str_field(&obj, "status").ok_or("missing \"status\"")?;
    match status.to_ascii_lowercase().as_str() {
        "sufficient" => Ok(SufficiencyVerdict::sufficient()),
        "insufficient" => SufficiencyVerdict::insufficient(str_field(&obj, "gap_analysis").unwrap_or("")),
        other => Err(format!("status must be sufficient or insufficient, got {other:?}")),
    }
}

fn parse_segment(v: Option<&Value>) -> Result<Option<Segment>, String> {
    let num = |v: &Value| v.as_f64().ok_or_else(|| format!("segment bound {v} is not a number"));
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(a)) if a.len() == 2 => Segment::new(num(&a[0])?, num(&a[1])?).map(Some),
        Some(Value::Object(o)) => {
            let start = o.get("start_s").or(o.get("start")).ok_or("segment has no start_s")?;
            let end = o.get("end_s").or(o.get("end")).ok_or("segment has no end_s")?;
            Segment::new(num(start)?, num(end)?).map(Some)
        }
        Some(other) => Err(format!("segment must be [start, end], got {other}")),
    }
}

pub fn parse_plan(reply: &str) -> Result<AugmentationPlan, String> {
    let obj = extract_json_object(reply)?;
    let action = str_field(&obj, "action").ok_or("missing \"action\"")?;
    let action = match action.to_ascii_lowercase().as_str() {
        "audio_qa" | "audioqa" | "qa" => ToolAction::AudioQA {
            query: str_field(&obj, "query")
                .ok_or("audio_qa needs a non-empty \"query\"")?
                .to_string(),
        },
        "recaption" | "guided_recaption" | "re-caption" => ToolAction::GuidedRecaption {
            focus: str_field(&obj, "focus")
                .ok_or("recaption needs a non-empty \"focus\"")?
                .to_string(),
        },
        "asr" | "transcribe" => ToolAction::ASR {
            segment: parse_segment(obj.get("segment"))?,
        },
        other => return Err(format!("action must be audio_qa, recaption or asr, got {other:?}")),
    };
    Ok(AugmentationPlan {
        action,
        rationale: str_field(&obj, "rationale").unwrap_or("").to_string(),
    })
}

/// Parsed answer reply; `clamped_from` holds an out-of-range confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub index: usize,
    pub confidence: f64,
    pub rationale: String,
    pub clamped_from: Option<f64>,
}

fn letter_index(raw: &str, n_choices: usize) -> Result<usize, String> {
    let t = raw.trim().trim_start_matches('(');
    let mut chars = t.chars();
    let c = chars.next().ok_or("answer_letter is empty")?;
    let rest = chars.as_str().trim_start_matches([')', '.', ':']);
    if !c.is_ascii_alphabetic() || rest.chars().next().is_some_and(|r| r.is_ascii_alphanumeric()) {
        return Err(format!("answer_letter {raw:?} is not an option letter"));
    }
    let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
    if idx >= n_choices {
        return Err(format!(
            "answer_letter {c} is not among A-{}",
            option_letter(n_choices - 1)
        ));
    }
    Ok(idx)
}

pub fn parse_answer(reply: &str, n_choices: usize) -> Result<ParsedAnswer, String> {
    let obj = extract_json_object(reply)?;
    let letter = str_field(&obj, "answer_letter")
        .or_else(|| str_field(&obj, "answer"))
        .ok_or("missing \"answer_letter\"")?;
    let index = letter_index(letter, n_choices)?;
    let confidence = match obj.get("confidence") {
        Some(Value::Number(n)) => n.as_f64().ok_or("confidence is not finite")?,
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("confidence {s:?} is not a number"))?,
        Some(other) => return Err(format!("confidence must be a number, got {other}")),
        None => return Err("missing \"confidence\"".into()),
    };
    if !confidence.is_finite() {
        return Err("confidence is not finite".into());
    }
    let clamped = confidence.clamp(0.0, 1.0);
    Ok(ParsedAnswer {
        index,
        confidence: clamped,
        rationale: str_field(&obj, "rationale").unwrap_or("").to_string(),
        clamped_from: (clamped != confidence).then_some(confidence),
    })
}

/// Result of a JSON conversation with re-asks.
struct Structured<T> {
    value: T,
    attempts: u32,
}

struct StructuredFailure {
    attempts: u32,
    last_error: String,
    last_reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub verdict: SufficiencyVerdict,
    pub history: AnalysisHistory,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub answer: FinalAnswer,
    pub attempts: u32,
    /// Observations about the reply (clamping, fallback reasons).
    pub notes: Vec<String>,
    /// Last model reply, whether or not it parsed.
    pub last_reply: Option<String>,
}

/// The agents, bound to their backends and prompts.
#[derive(Debug, Clone)]
pub struct AgentTeam {
    pub allm: ModelClient,
    pub llm: ModelClient,
    pub asr: ModelClient,
    pub prompts: Arc<PromptSet>,
    pub settings: AgentSettings,
}

impl AgentTeam {
    #[allow(clippy::too_many_arguments)]
    fn chat_structured<T>(
        &self,
        scope: &CallScope,
        tag: &str,
        prompt: RenderedPrompt,
        temperature: f64,
        format: &str,
        log: &mut Vec<BackendCallRecord>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Result<Structured<T>, StructuredFailure>, BackendError> {
        let mut messages = Vec::new();
        if let Some(system) = prompt.system {
            messages.push(Message::system(system));
        }
        messages.push(Message::user(prompt.user));
        let mut last_error = String::new();
        let mut last_reply = None;
        let total = self.settings.reask_limit + 1;
        for attempt in 1..=total {
            let mut req = ChatRequest::new(messages.clone());
            req.temperature = temperature;
            req.max_tokens = self.settings.max_tokens;
            req.response_hint = true;
            req.tag = Some(tag.to_string());
            let reply = match self.llm.chat(scope, req, log) {
                Ok(r) => r,
                // Empty replies count as unparseable rather than fatal.
                Err(BackendError::MalformedResponse(e)) => {
                    last_error = e;
                    String::new()
                }
                Err(e) => return Err(e),
            };
            if !reply.is_empty() {
                match parse(&reply) {
                    Ok(value) => {
                        return Ok(Ok(Structured {
                            value,
                            attempts: attempt,
                        }))
                    }
                    Err(e) => last_error = e,
                }
            }
            if attempt < total {
                let reask = self.prompts.render(
                    "reask",
                    &Bindings::new().set("error", last_error.clone()).set("format", format),
                );
                let reask = reask.map(|p| p.user).unwrap_or_else(|e| e.to_string());
                messages.push(Message::assistant(reply.clone()));
                messages.push(Message::user(reask));
            }
            last_reply = Some(reply);
        }
        Ok(Err(StructuredFailure {
            attempts: total,
            last_error,
            last_reply,
        }))
    }

    /// Captions the clip into the document's first item.
    pub fn caption_agent(
        &self,
        scope: &CallScope,
        audio: &AudioRef,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<EvidenceItem, AgentError> {
        let prompt = self.prompts.render("caption", &Bindings::new())?;
        let text = self.allm.audio_caption(scope, audio, prompt.user, None, log)?;
        let doc = EvidenceDocument::new(text.trim()).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        Ok(doc.items()[0].clone())
    }

    /// Judges whether `doc` suffices for `q`; an insufficient verdict appends
    /// its gap analysis to the returned history.
    #[allow(clippy::too_many_arguments)]
    pub fn plan_agent(
        &self,
        scope: &CallScope,
        q: &Question,
        doc: &EvidenceDocument,
        hist: &AnalysisHistory,
        iteration: usize,
        max_iterations: usize,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<PlanOutcome, AgentError> {
        let vars = Bindings::new()
            .set("question", q.text.trim())
            .set("choices", q.lettered_choices())
            .set("document", doc.render())
            .set("history", hist.render())
            .set("iteration", iteration.to_string())
            .set("max_iterations", max_iterations.to_string());
        let prompt = self.prompts.render("plan", &vars)?;
        let record_sufficient = self.settings.record_sufficient_analysis;
        let outcome = self.chat_structured(
            scope,
            "plan",
            prompt,
            self.settings.plan_temperature,
            r#"{"status": "sufficient" | "insufficient", "gap_analysis": "..."}"#,
            log,
            |reply| {
                let verdict = parse_verdict(reply)?;
                let extra = if record_sufficient && verdict.is_sufficient() {
                    extract_json_object(reply)
                        .ok()
                        .and_then(|o| str_field(&o, "gap_analysis").map(str::to_string))
                } else {
                    None
                };
                Ok((verdict, extra))
            },
        )?;
        let Structured {
            value: (verdict, extra),
            attempts,
        } = outcome.map_err(|f| AgentError::PlanParseFailure {
            attempts: f.attempts,
            last_error: f.last_error,
        })?;
        let gap = if verdict.is_sufficient() {
            extra
        } else {
            Some(verdict.gap_analysis.clone())
        };
        let history = match gap {
            Some(g) => hist
                .append(iteration, g)
                .map_err(|e| AgentError::Precondition(e.to_string()))?,
            None => hist.clone(),
        };
        Ok(PlanOutcome {
            verdict,
            history,
            attempts,
        })
    }

    /// Chooses one tool action to fill the latest gap.
    pub fn interact_agent(
        &self,
        scope: &CallScope,
        doc: &EvidenceDocument,
        hist: &AnalysisHistory,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<AugmentationPlan, AgentError> {
        let latest = hist
            .latest()
            .ok_or_else(|| AgentError::Precondition("interaction requires a gap analysis".into()))?;
        let vars = Bindings::new()
            .set("document", doc.render())
            .set("history", hist.render())
            .set("latest_gap", latest.gap_analysis.clone());
        let prompt = self.prompts.render("interact", &vars)?;
        let outcome = self.chat_structured(
            scope,
            "interact",
            prompt,
            self.settings.interact_temperature,
            r#"{"action": "audio_qa" | "recaption" | "asr", "query": "...", "focus": "...", "segment": [start_s, end_s] | null, "rationale": "..."}"#,
            log,
            parse_plan,
        )?;
        outcome.map(|s| s.value).map_err(|f| AgentError::InteractParseFailure {
            attempts: f.attempts,
            last_error: f.last_error,
        })
    }

    /// Executes `plan` and wraps the tool output as evidence for `iteration`.
    pub fn augment_agent(
        &self,
        scope: &CallScope,
        plan: &AugmentationPlan,
        audio: &AudioRef,
        iteration: usize,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<EvidenceItem, AgentError> {
        let content = match &plan.action {
            ToolAction::AudioQA { query } => {
                let prompt = self
                    .prompts
                    .render("audio_qa", &Bindings::new().set("query", query.clone()))?;
                self.allm.audio_qa(scope, audio, prompt.user, query.clone(), log)?
            }
            ToolAction::GuidedRecaption { focus } => {
                let prompt = self
                    .prompts
                    .render("recaption", &Bindings::new().set("focus", focus.clone()))?;
                self.allm
                    .audio_caption(scope, audio, prompt.user, Some(focus.clone()), log)?
            }
            ToolAction::ASR { .. } => {
                let transcript = self.asr.transcribe(scope, audio, log)?;
                if transcript.trim().is_empty() {
                    NO_SPEECH_SENTINEL.to_string()
                } else {
                    transcript
                }
            }
        };
        Ok(EvidenceItem::new(
            plan.action.source(),
            content.trim(),
            iteration,
            plan.action.provenance(),
        ))
    }

    /// Picks an option from the final document. Never fails: unusable output
    /// falls back to the first option with confidence 0.
    pub fn answer_agent(
        &self,
        scope: &CallScope,
        doc: &EvidenceDocument,
        q: &Question,
        hist: &AnalysisHistory,
        log: &mut Vec<BackendCallRecord>,
    ) -> AnswerOutcome {
        let history_section = if self.settings.answer_sees_history {
            format!("\nAnalysis history:\n{}\n", hist.render())
        } else {
            String::new()
        };
        let vars = Bindings::new()
            .set("question", q.text.trim())
            .set("choices", q.lettered_choices())
            .set("document", doc.render())
            .set("history_section", history_section);
        let prompt = match self.prompts.render("answer", &vars) {
            Ok(p) => p,
            Err(e) => {
                return AnswerOutcome {
                    answer: FinalAnswer::fallback(format!("fallback: {e}")),
                    attempts: 0,
                    notes: vec![e.to_string()],
                    last_reply: None,
                }
            }
        };
        let n = q.choices.len();
        let letters = format!("A-{}", option_letter(n - 1));
        let format = format!(r#"{{"answer_letter": "<one of {letters}>", "confidence": <0..1>, "rationale": "..."}}"#);
        match self.chat_structured(
            scope,
            "answer",
            prompt,
            self.settings.answer_temperature,
            &format,
            log,
            |reply| parse_answer(reply, n).map(|p| (p, reply.to_string())),
        ) {
            Ok(Ok(Structured {
                value: (p, reply),
                attempts,
            })) => {
                let mut notes = Vec::new();
                if let Some(orig) = p.clamped_from {
                    notes.push(format!("confidence {orig} clamped to {}", p.confidence));
                }
                AnswerOutcome {
                    answer: FinalAnswer {
                        selected_index: p.index,
                        confidence: p.confidence,
                        rationale: p.rationale,
                        degraded: false,
                    },
                    attempts,
                    notes,
                    last_reply: Some(reply),
                }
            }
            Ok(Err(f)) => AnswerOutcome {
                answer: FinalAnswer::fallback(format!("fallback: {}", f.last_error)),
                attempts: f.attempts,
                notes: vec![format!(
                    "answer unparseable after {} attempt(s): {}",
                    f.attempts, f.last_error
                )],
                last_reply: f.last_reply,
            },
            Err(e) => AnswerOutcome {
                answer: FinalAnswer::fallback(format!("fallback: {e}")),
                attempts: 1,
                notes: vec![format!("answer backend failed: {e}")],
                last_reply: None,
            },
        }
    }
}
