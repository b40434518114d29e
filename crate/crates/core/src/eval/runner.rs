use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::{score, AggregateReport, AnswerMatcher, BenchmarkSample, EvalError, LlmNormalizer, SampleResult};
use crate::backend::CallScope;
use crate::orchestrator::{Pipeline, PipelineTrace, MAX_ITERATIONS_LIMIT};

/// Runs a pipeline over a dataset and scores the answers.
#[derive(Clone)]
pub struct Evaluator {
    pub pipeline: Pipeline,
    pub matcher: Arc<dyn AnswerMatcher>,
    /// Consulted only for answers the matcher could not resolve.
    pub normalizer: Option<LlmNormalizer>,
    pub workers: usize,
    /// Where per-sample traces go; `None` keeps them in memory only.
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub results: Vec<SampleResult>,
    #[serde(skip)]
    pub traces: Vec<PipelineTrace>,
    pub report: AggregateReport,
    /// Per-sample problems that did not stop the run, as `(sample_id, message)`.
    pub errors: Vec<(String, String)>,
}

impl Evaluator {
    pub fn new(pipeline: Pipeline, matcher: Arc<dyn AnswerMatcher>) -> Self {
        Self {
            pipeline,
            matcher,
            normalizer: None,
            workers: 1,
            trace_dir: None,
        }
    }

    fn evaluate_one(&self, sample: &BenchmarkSample, run_label: &str) -> (SampleResult, PipelineTrace, Option<String>) {
        let scope = CallScope::new(sample.id.clone()).with_label(run_label);
        let (_, mut trace) = self.pipeline.run_scoped(&scope, &sample.audio, &sample.question);
        let choices = &sample.question.choices;
        let matched = self.matcher.match_answer(&trace.answer_text, choices);
        let mut result = SampleResult::new(
            sample.id.clone(),
            trace.answer_text.clone(),
            matched,
            None,
            sample.ground_truth_index(),
        );
        if matched.is_none() {
            if let Some(n) = &self.normalizer {
                let out = n.normalize(
                    &scope,
                    &trace.answer_text,
                    &sample.question,
                    &mut result.normalization_calls,
                );
                result = SampleResult {
                    normalization_note: out.note,
                    ..result
                };
                result.normalized_index = out.index;
                result.correct = result.resolved_index() == Some(sample.ground_truth_index());
            }
        }
        result.degraded = trace.degraded();
        result.iterations_used = trace.plan_calls();
        trace.scoring = Some(result.clone());
        let err = self
            .trace_dir
            .as_ref()
            .and_then(|dir| trace.write_to(dir).err())
            .map(|e| e.to_string());
        (result, trace, err)
    }

    /// Evaluates every sample; output order follows `samples`.
    pub fn evaluate(&self, samples: &[BenchmarkSample], run_label: &str) -> Result<EvalRun, EvalError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| EvalError::Format(format!("worker pool: {e}")))?;
        let outcomes: Vec<_> = pool.install(|| samples.par_iter().map(|s| self.evaluate_one(s, run_label)).collect());
        let mut run = EvalRun {
            results: Vec::with_capacity(outcomes.len()),
            traces: Vec::with_capacity(outcomes.len()),
            report: score(&[], samples)?,
            errors: Vec::new(),
        };
        for (result, trace, err) in outcomes {
            if let Some(e) = err {
                log::warn!("sample {}: {e}", result.sample_id);
                run.errors.push((result.sample_id.clone(), e));
            }
            run.results.push(result);
            run.traces.push(trace);
        }
        run.report = score(&run.results, samples)?;
        Ok(run)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub budget: usize,
    pub run: EvalRun,
}

/// Evaluates the dataset once per iteration budget. Each budget is an
/// independent run with label `budget-<k>`; traces go under
/// `<trace_dir>/budget-<k>/`.
pub fn sweep_iterations(
    evaluator: &Evaluator,
    samples: &[BenchmarkSample],
    budgets: &[usize],
) -> Result<Vec<SweepRow>, EvalError> {
    if budgets.is_empty() {
        return Err(EvalError::InvalidSweep("no budgets given".into()));
    }
    if let Some(b) = budgets.iter().find(|b| **b > MAX_ITERATIONS_LIMIT) {
        return Err(EvalError::InvalidSweep(format!(
            "budget {b} exceeds {MAX_ITERATIONS_LIMIT}"
        )));
    }
    budgets
        .iter()
        .map(|&budget| {
            let label = format!("budget-{budget}");
            let ev = Evaluator {
                pipeline: evaluator.pipeline.with_max_iterations(budget)?,
                trace_dir: evaluator.trace_dir.as_ref().map(|d| d.join(&label)),
                ..evaluator.clone()
            };
            Ok(SweepRow {
                budget,
                run: ev.evaluate(samples, &label)?,
            })
        })
        .collect()
}
