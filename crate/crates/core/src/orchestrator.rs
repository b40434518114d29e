//! The refinement loop: caption, then up to `max_iterations` rounds of
//! plan / interact / augment, then answer.
//!
//! Every failure after the caption degrades instead of aborting, so each run
//! ends with exactly one [`FinalAnswer`] and a [`PipelineTrace`] recording what
//! happened, including which fallbacks fired.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    tool_failure_sentinel, AgentError, AgentSettings, AgentTeam, AugmentationPlan, FinalAnswer, SufficiencyVerdict,
};
use crate::backend::{
    BackendCallRecord, BackendConfig, BackendError, BackendRegistry, CallScope, ModelClient, RequestLimiter,
    DEFAULT_MAX_CONCURRENT_REQUESTS,
};
use crate::eval::SampleResult;
use crate::evidence::{AnalysisHistory, AudioRef, EvidenceDocument, EvidenceItem, Question};
use crate::prompts::{PromptError, PromptSet};

pub const DEFAULT_MAX_ITERATIONS: usize = 3;
pub const MAX_ITERATIONS_LIMIT: usize = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("trace file {path}")]
    TraceIo { path: String, source: std::io::Error },
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}
fn default_max_concurrent() -> usize {
    DEFAULT_MAX_CONCURRENT_REQUESTS
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Audio-capable model: captioning, guided re-captioning, audio QA.
    #[serde(default)]
    pub allm: BackendConfig,
    /// Text model for the planning, interaction and answering agents.
    #[serde(default)]
    pub llm: BackendConfig,
    #[serde(default)]
    pub asr: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub write_traces: bool,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub agents: AgentSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            allm: BackendConfig::default(),
            llm: BackendConfig::default(),
            asr: BackendConfig::default(),
            prompt_dir: None,
            write_traces: true,
            max_concurrent_requests: DEFAULT_MAX_CONCURRENT_REQUESTS,
            agents: AgentSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// All three backends pointed at the scripted mock.
    pub fn mock() -> Self {
        Self {
            allm: BackendConfig::mock(),
            llm: BackendConfig::mock(),
            asr: BackendConfig::mock(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_iterations > MAX_ITERATIONS_LIMIT {
            return Err(PipelineError::Config(format!(
                "max_iterations {} exceeds {MAX_ITERATIONS_LIMIT}",
                self.max_iterations
            )));
        }
        for (name, b) in [("allm", &self.allm), ("llm", &self.llm), ("asr", &self.asr)] {
            b.validate()
                .map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Caption,
    Plan,
    Interact,
    Augment,
    Answer,
    Normalize,
}

/// A fallback that fired during a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degradation {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub verdict: SufficiencyVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AugmentationPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceItem>,
    pub calls: Vec<BackendCallRecord>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: u64,
    pub caption_ms: u64,
    pub answer_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub run_label: String,
    pub max_iterations: usize,
    pub audio: AudioRef,
    pub question: Question,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_caption: Option<String>,
    pub caption_calls: Vec<BackendCallRecord>,
    pub iterations: Vec<IterationRecord>,
    pub history: AnalysisHistory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_document: Option<EvidenceDocument>,
    pub final_answer: FinalAnswer,
    /// Free-text form of the answer, as scored.
    pub answer_text: String,
    pub answer_calls: Vec<BackendCallRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_notes: Vec<String>,
    pub degradations: Vec<Degradation>,
    pub aborted: bool,
    /// The caption call failed on transport, so no model was reachable.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backend_unreachable: bool,
    pub timings: Timings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<SampleResult>,
}

impl PipelineTrace {
    pub fn plan_calls(&self) -> usize {
        self.iterations.len()
    }

    pub fn interact_calls(&self) -> usize {
        self.iterations.iter().filter(|r| r.plan.is_some()).count()
    }

    pub fn augmentations(&self) -> usize {
        self.iterations.iter().filter(|r| r.evidence.is_some()).count()
    }

    pub fn document_len(&self) -> usize {
        self.final_document.as_ref().map_or(0, EvidenceDocument::len)
    }

    pub fn degraded(&self) -> bool {
        !self.degradations.is_empty()
    }

    pub fn degraded_at(&self, stage: Stage) -> bool {
        self.degradations.iter().any(|d| d.stage == stage)
    }

    pub fn all_calls(&self) -> impl Iterator<Item = &BackendCallRecord> {
        self.caption_calls
            .iter()
            .chain(self.iterations.iter().flat_map(|r| r.calls.iter()))
            .chain(self.answer_calls.iter())
    }

    /// Copy with every timing field zeroed, for replay comparisons.
    pub fn redacted(&self) -> Self {
        let mut t = self.clone();
        t.timings = Timings::default();
        let zero = |calls: &mut Vec<BackendCallRecord>| calls.iter_mut().for_each(|c| c.latency_ms = 0);
        zero(&mut t.caption_calls);
        zero(&mut t.answer_calls);
        for r in &mut t.iterations {
            r.elapsed_ms = 0;
            zero(&mut r.calls);
        }
        if let Some(s) = &mut t.scoring {
            zero(&mut s.normalization_calls);
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// `<sample_id>.trace.json`, with path-unsafe characters replaced.
    pub fn file_name(&self) -> String {
        trace_file_name(&self.sample_id)
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        let path = dir.join(self.file_name());
        let io = |source| PipelineError::TraceIo {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(&path, self.to_json()).map_err(io)?;
        Ok(path)
    }

    pub fn read_from(path: &Path) -> Result<Self, PipelineError> {
        let io = |source| PipelineError::TraceIo {
            path: path.display().to_string(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        serde_json::from_str(&text).map_err(|e| io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }
}

pub fn trace_file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.trace.json")
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

/// A configured agent team plus the iteration budget.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub team: AgentTeam,
    pub max_iterations: usize,
}

impl Pipeline {
    pub fn new(team: AgentTeam, max_iterations: usize) -> Result<Self, PipelineError> {
        if max_iterations > MAX_ITERATIONS_LIMIT {
            return Err(PipelineError::Config(format!(
                "max_iterations {max_iterations} exceeds {MAX_ITERATIONS_LIMIT}"
            )));
        }
        Ok(Self { team, max_iterations })
    }

    /// Resolves backends through `registry`; all clients share one request cap.
    pub fn from_config(cfg: &PipelineConfig, registry: &BackendRegistry) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let limiter = RequestLimiter::new(cfg.max_concurrent_requests);
        let client = |b: &BackendConfig| -> Result<ModelClient, PipelineError> {
            Ok(ModelClient::new(registry.build(b)?, b.clone(), limiter.clone())?)
        };
        let prompts = match &cfg.prompt_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::builtin(),
        };
        let team = AgentTeam {
            allm: client(&cfg.allm)?,
            llm: client(&cfg.llm)?,
            asr: client(&cfg.asr)?,
            prompts: Arc::new(prompts),
            settings: cfg.agents.clone(),
        };
        Self::new(team, cfg.max_iterations)
    }

    pub fn with_max_iterations(&self, max_iterations: usize) -> Result<Self, PipelineError> {
        Self::new(self.team.clone(), max_iterations)
    }

    pub fn run(&self, sample_id: &str, audio: &AudioRef, q: &Question) -> (FinalAnswer, PipelineTrace) {
        self.run_scoped(&CallScope::new(sample_id), audio, q)
    }

    pub fn run_scoped(&self, scope: &CallScope, audio: &AudioRef, q: &Question) -> (FinalAnswer, PipelineTrace) {
        let started = Instant::now();
        let team = &self.team;
        let mut trace = PipelineTrace {
            sample_id: scope.sample_id.clone(),
            run_label: scope.run_label.clone(),
            max_iterations: self.max_iterations,
            audio: audio.clone(),
            question: q.clone(),
            initial_caption: None,
            caption_calls: Vec::new(),
            iterations: Vec::new(),
            history: AnalysisHistory::new(),
            final_document: None,
            final_answer: FinalAnswer::fallback("not answered"),
            answer_text: String::new(),
            answer_calls: Vec::new(),
            answer_notes: Vec::new(),
            degradations: Vec::new(),
            aborted: false,
            backend_unreachable: false,
            timings: Timings::default(),
            scoring: None,
        };

        let t0 = Instant::now();
        let caption = team.caption_agent(scope, audio, &mut trace.caption_calls);
        trace.timings.caption_ms = ms(t0);
        let mut doc = match caption.map(|item| EvidenceDocument::new(item.content)) {
            Ok(Ok(doc)) => doc,
            Ok(Err(e)) => return self.abort(trace, e.to_string(), q, started),
            Err(e) => {
                trace.backend_unreachable = matches!(&e, AgentError::Backend(b) if b.is_unreachable());
                return self.abort(trace, e.to_string(), q, started);
            }
        };
        trace.initial_caption = Some(doc.caption().to_string());

        let mut hist = AnalysisHistory::new();
        for iteration in 1..=self.max_iterations {
            let t_iter = Instant::now();
            let mut calls = Vec::new();
            let verdict = match team.plan_agent(scope, q, &doc, &hist, iteration, self.max_iterations, &mut calls) {
                Ok(out) => {
                    hist = out.history;
                    out.verdict
                }
                Err(e) => {
                    trace.degradations.push(Degradation {
                        stage: Stage::Plan,
                        iteration: Some(iteration),
                        detail: format!("{e}; treating evidence as sufficient"),
                    });
                    SufficiencyVerdict::sufficient()
                }
            };
            let mut record = IterationRecord {
                iteration,
                verdict: verdict.clone(),
                plan: None,
                evidence: None,
                calls: Vec::new(),
                elapsed_ms: 0,
            };
            if !verdict.is_sufficient() {
                let plan = team.interact_agent(scope, &doc, &hist, &mut calls).unwrap_or_else(|e| {
                    trace.degradations.push(Degradation {
                        stage: Stage::Interact,
                        iteration: Some(iteration),
                        detail: format!("{e}; falling back to transcription"),
                    });
                    AugmentationPlan::fallback()
                });
                let item = team
                    .augment_agent(scope, &plan, audio, iteration, &mut calls)
                    .unwrap_or_else(|e| {
                        trace.degradations.push(Degradation {
                            stage: Stage::Augment,
                            iteration: Some(iteration),
                            detail: e.to_string(),
                        });
                        EvidenceItem::new(
                            plan.action.source(),
                            tool_failure_sentinel(plan.action.capability()),
                            iteration,
                            format!("{} (failed: {e})", plan.action.provenance()),
                        )
                    });
                match doc.integrate(item) {
                    Ok(next) => {
                        doc = next;
                        record.evidence = Some(doc.last().clone());
                    }
                    Err(e) => trace.degradations.push(Degradation {
                        stage: Stage::Augment,
                        iteration: Some(iteration),
                        detail: format!("evidence not integrated: {e}"),
                    }),
                }
                record.plan = Some(plan);
            }
            record.calls = calls;
            record.elapsed_ms = ms(t_iter);
            let stop = verdict.is_sufficient();
            trace.iterations.push(record);
            if stop {
                break;
            }
        }

        let t_answer = Instant::now();
        let outcome = team.answer_agent(scope, &doc, q, &hist, &mut trace.answer_calls);
        trace.timings.answer_ms = ms(t_answer);
        if outcome.answer.degraded {
            trace.degradations.push(Degradation {
                stage: Stage::Answer,
                iteration: None,
                detail: outcome.notes.join("; "),
            });
        }
        trace.answer_notes = outcome.notes;
        trace.answer_text = outcome.answer.statement(q);
        trace.final_answer = outcome.answer.clone();
        trace.history = hist;
        trace.final_document = Some(doc);
        trace.timings.total_ms = ms(started);
        (outcome.answer, trace)
    }

    fn abort(
        &self,
        mut trace: PipelineTrace,
        reason: String,
        q: &Question,
        started: Instant,
    ) -> (FinalAnswer, PipelineTrace) {
        trace.aborted = true;
        trace.degradations.push(Degradation {
            stage: Stage::Caption,
            iteration: None,
            detail: format!("caption failed: {reason}"),
        });
        let answer = FinalAnswer::fallback(format!("fallback: caption failed: {reason}"));
        trace.answer_text = answer.statement(q);
        trace.final_answer = answer.clone();
        trace.timings.total_ms = ms(started);
        (answer, trace)
    }
}

/// Builds a pipeline from `cfg` and runs one sample, keyed by the audio file name.
pub fn run_pipeline(
    audio: &AudioRef,
    q: &Question,
    cfg: &PipelineConfig,
    registry: &BackendRegistry,
) -> Result<(FinalAnswer, PipelineTrace), PipelineError> {
    let pipeline = Pipeline::from_config(cfg, registry)?;
    Ok(pipeline.run(audio.file_name(), audio, q))
}
