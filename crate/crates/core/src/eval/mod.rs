//! Benchmark harness: dataset loading, answer matching and normalization,
//! scoring, baselines, iteration sweeps and report rendering.

mod dataset;
mod matching;
mod normalize;
mod report;
mod runner;
mod score;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendCallRecord;

pub use dataset::{adapt_mmar, adapt_mmau, load_dataset, parse_dataset, BenchmarkSample, LoadedDataset, Rejection};
pub use matching::{match_answer, AnswerMatcher, CascadeMatcher, ExactMatcher, LetterMatcher, MatcherRegistry};
pub use normalize::{parse_normalizer_reply, LlmNormalizer, NormalizationOutcome};
pub use report::{format_pct, render_csv, render_markdown, ReportRow};
pub use runner::{sweep_iterations, EvalRun, Evaluator, SweepRow};
pub use score::{random_baseline, score, AggregateReport, BaselineReport, Cell, DualCell, GroupCell};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset file {path}")]
    FileNotFound { path: String, source: std::io::Error },
    #[error("dataset has no valid samples ({rejected} rejected)")]
    EmptyDataset { rejected: usize },
    #[error("duplicate sample ids: {}", .0.join(", "))]
    DuplicateId(Vec<String>),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("results and samples do not align: {0}")]
    IdMismatch(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Pipeline(#[from] crate::orchestrator::PipelineError),
}

/// Scoring outcome for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub raw_answer: String,
    /// Choice found by the regex / string-match cascade.
    pub matched_index: Option<usize>,
    /// Choice found by LLM normalization, tried only when matching failed.
    pub normalized_index: Option<usize>,
    /// Correct after post-processing.
    pub correct: bool,
    pub degraded: bool,
    pub iterations_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_note: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normalization_calls: Vec<BackendCallRecord>,
}

impl SampleResult {
    /// Builds a result, deriving `correct` from the indices.
    pub fn new(
        sample_id: impl Into<String>,
        raw_answer: impl Into<String>,
        matched_index: Option<usize>,
        normalized_index: Option<usize>,
        ground_truth: usize,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            raw_answer: raw_answer.into(),
            matched_index,
            normalized_index,
            correct: matched_index.or(normalized_index) == Some(ground_truth),
            degraded: false,
            iterations_used: 0,
            normalization_note: None,
            normalization_calls: Vec::new(),
        }
    }

    /// The index used for post-processed scoring.
    pub fn resolved_index(&self) -> Option<usize> {
        self.matched_index.or(self.normalized_index)
    }
}
