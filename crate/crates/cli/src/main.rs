mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use audioreason::backend::{BackendRegistry, MockScript, ScriptedBackend};
use audioreason::eval::{
    adapt_mmar, adapt_mmau, load_dataset, random_baseline, render_csv, render_markdown, score, sweep_iterations,
    BenchmarkSample, EvalError, EvalRun, Evaluator, LlmNormalizer, LoadedDataset, MatcherRegistry, ReportRow,
    SampleResult,
};
use audioreason::evidence::{AudioRef, Question};
use audioreason::orchestrator::{Pipeline, PipelineTrace};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::FileConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_DATASET: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;

/// Iterative evidence-chain audio question answering and benchmark harness.
#[derive(Parser, Debug)]
#[command(name = "audioreason", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML config with backend and harness settings
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every backend with the scripted mock in this JSON file
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Iteration budget (overrides the config)
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// Parallel samples (overrides the config)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Answer matcher by name
    #[arg(long, global = true)]
    matcher: Option<String>,
    /// Skip LLM normalization of unmatched answers
    #[arg(long, global = true)]
    no_normalize: bool,
}

#[derive(clap::Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    /// Directory audio paths are resolved against for mmau/mmar input
    #[arg(long)]
    audio_root: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Jsonl,
    Mmau,
    Mmar,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Answer one question about one audio file
    Run {
        /// Take the sample from a dataset instead of --audio/--question/--choice
        #[arg(long, requires = "sample_id")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long, conflicts_with = "dataset")]
        audio: Option<String>,
        #[arg(long, conflicts_with = "dataset")]
        question: Option<String>,
        #[arg(long = "choice", conflicts_with = "dataset")]
        choices: Vec<String>,
        /// Write the trace here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a dataset
    Eval {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a dataset once per iteration budget
    Sweep {
        #[command(flatten)]
        data: DatasetArgs,
        /// Comma-separated budgets
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        budgets: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score a seeded uniform random guess
    Baseline {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render tables from a directory of traces
    Report {
        #[command(flatten)]
        data: DatasetArgs,
        /// A trace directory, or a directory of per-run trace directories
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Fails with exit code 3.
#[derive(Debug)]
struct Unreachable(String);

impl std::fmt::Display for Unreachable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "backend unreachable: {}", self.0)
    }
}

impl std::error::Error for Unreachable {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Unreachable>() {
            return EXIT_UNREACHABLE;
        }
        if let Some(ev) = cause.downcast_ref::<EvalError>() {
            return match ev {
                EvalError::FileNotFound { .. }
                | EvalError::EmptyDataset { .. }
                | EvalError::DuplicateId(_)
                | EvalError::Format(_)
                | EvalError::IdMismatch(_) => EXIT_DATASET,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

struct Setup {
    cfg: FileConfig,
    registry: BackendRegistry,
    mock: bool,
}

impl Setup {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = FileConfig::load(common.config.as_deref())?;
        if let Some(n) = common.max_iterations {
            cfg.pipeline.max_iterations = n;
        }
        if let Some(w) = common.workers {
            cfg.eval.workers = w;
        }
        if let Some(m) = &common.matcher {
            cfg.eval.matcher = m.clone();
        }
        if common.no_normalize {
            cfg.eval.normalize = false;
        }
        let script = match &common.mock_script {
            Some(path) => {
                let script =
                    MockScript::load(path).with_context(|| format!("loading mock script {}", path.display()))?;
                for b in [&mut cfg.pipeline.allm, &mut cfg.pipeline.llm, &mut cfg.pipeline.asr] {
                    b.kind = "mock".into();
                    b.backoff_base_ms = 1;
                }
                Some(Arc::new(ScriptedBackend::new(script)))
            }
            None => None,
        };
        let mock = script.is_some();
        cfg.pipeline.validate()?;
        Ok(Self {
            registry: BackendRegistry::with_defaults(script),
            cfg,
            mock,
        })
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::from_config(&self.cfg.pipeline, &self.registry)?)
    }

    fn evaluator(&self, trace_dir: Option<PathBuf>) -> Result<Evaluator> {
        let pipeline = self.pipeline()?;
        let matchers = MatcherRegistry::default();
        let matcher = matchers.get(&self.cfg.eval.matcher).ok_or_else(|| {
            anyhow!(
                "unknown matcher {:?} (available: {})",
                self.cfg.eval.matcher,
                matchers.names().join(", ")
            )
        })?;
        let normalizer = self.cfg.eval.normalize.then(|| {
            let mut n = LlmNormalizer::new(pipeline.team.llm.clone(), pipeline.team.prompts.clone());
            n.temperature = self.cfg.pipeline.agents.normalize_temperature;
            n
        });
        Ok(Evaluator {
            pipeline,
            matcher,
            normalizer,
            workers: self.cfg.eval.workers,
            trace_dir,
        })
    }

    /// In live mode a run where no sample reached a model is an error.
    fn check_reachable(&self, traces: &[PipelineTrace]) -> Result<()> {
        if self.mock || traces.is_empty() || !traces.iter().all(|t| t.backend_unreachable) {
            return Ok(());
        }
        let detail = traces[0]
            .degradations
            .first()
            .map(|d| d.detail.clone())
            .unwrap_or_default();
        Err(Unreachable(detail).into())
    }
}

fn load(data: &DatasetArgs) -> Result<LoadedDataset> {
    let loaded = match data.format {
        Format::Jsonl => load_dataset(&data.dataset)?,
        Format::Mmau | Format::Mmar => {
            let text = fs::read_to_string(&data.dataset).map_err(|source| EvalError::FileNotFound {
                path: data.dataset.display().to_string(),
                source,
            })?;
            let root = data
                .audio_root
                .clone()
                .or_else(|| data.dataset.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            match data.format {
                Format::Mmau => adapt_mmau(&text, &root)?,
                _ => adapt_mmar(&text, &root)?,
            }
        }
    };
    for r in &loaded.rejections {
        log::warn!("{}:{}: rejected: {}", data.dataset.display(), r.line, r.reason);
    }
    if !loaded.rejections.is_empty() {
        eprintln!("{} line(s) rejected", loaded.rejections.len());
    }
    Ok(loaded)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn results_jsonl(results: &[SampleResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect()
}

fn write_tables(out: &Path, rows: &[ReportRow]) -> Result<String> {
    let md = render_markdown(rows);
    write(&out.join("report.md"), &md)?;
    write(&out.join("report.csv"), &render_csv(rows))?;
    Ok(md)
}

fn report_errors(run: &EvalRun) {
    for (id, e) in &run.errors {
        eprintln!("sample {id}: {e}");
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let setup = Setup::new(&cli.common)?;
    match cli.command {
        Command::Run {
            dataset,
            sample_id,
            audio,
            question,
            choices,
            out,
        } => {
            let (id, audio, q) = match dataset {
                Some(path) => {
                    let id = sample_id.expect("clap enforces --sample-id");
                    let ds = load_dataset(&path)?;
                    let s = ds
                        .samples
                        .into_iter()
                        .find(|s| s.id == id)
                        .ok_or_else(|| EvalError::IdMismatch(format!("no sample {id:?} in {}", path.display())))?;
                    (s.id, s.audio, s.question)
                }
                None => {
                    let (Some(audio), Some(question)) = (audio, question) else {
                        bail!("run needs --audio, --question and --choice, or --dataset with --sample-id");
                    };
                    let audio = AudioRef::new(audio, None, None)?;
                    let id = sample_id.unwrap_or_else(|| audio.file_name().to_string());
                    (id, audio, Question::new(question, choices)?)
                }
            };
            let pipeline = setup.pipeline()?;
            let (answer, trace) = pipeline.run(&id, &audio, &q);
            setup.check_reachable(std::slice::from_ref(&trace))?;
            if let Some(dir) = out {
                let path = trace.write_to(&dir)?;
                eprintln!("trace written to {}", path.display());
            }
            let summary = serde_json::json!({
                "sample_id": id,
                "answer": q.choices[answer.selected_index],
                "letter": answer.letter().to_string(),
                "confidence": answer.confidence,
                "degraded": answer.degraded,
                "iterations": trace.plan_calls(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { data, out } => {
            let ds = load(&data)?;
            let ev = setup.evaluator(Some(out.join("traces")))?;
            let run = ev.evaluate(&ds.samples, "")?;
            setup.check_reachable(&run.traces)?;
            report_errors(&run);
            write(&out.join("results.jsonl"), &results_jsonl(&run.results))?;
            let label = format!("pipeline (k={})", setup.cfg.pipeline.max_iterations);
            print!("{}", write_tables(&out, &[ReportRow::new(label, run.report)])?);
        }
        Command::Sweep { data, budgets, out } => {
            let ds = load(&data)?;
            let ev = setup.evaluator(Some(out.join("traces")))?;
            let rows = sweep_iterations(&ev, &ds.samples, &budgets)?;
            let mut table = Vec::new();
            for row in rows {
                setup.check_reachable(&row.run.traces)?;
                report_errors(&row.run);
                write(
                    &out.join(format!("budget-{}", row.budget)).join("results.jsonl"),
                    &results_jsonl(&row.run.results),
                )?;
                table.push(ReportRow::new(format!("iteration {}", row.budget), row.run.report));
            }
            print!("{}", write_tables(&out, &table)?);
        }
        Command::Baseline { data, seed, out } => {
            let ds = load(&data)?;
            let b = random_baseline(&ds.samples, seed);
            let rows = [ReportRow::new(format!("random (seed {seed})"), b.report.clone())];
            let md = match &out {
                Some(dir) => {
                    write(&dir.join("baseline.json"), &serde_json::to_string_pretty(&b)?)?;
                    write_tables(dir, &rows)?
                }
                None => render_markdown(&rows),
            };
            print!("{md}");
            println!("expected accuracy: {:.2}", b.expected_accuracy);
        }
        Command::Report { data, traces, out } => {
            let ds = load(&data)?;
            let rows = report_rows(&traces, &ds.samples)?;
            let md = match &out {
                Some(dir) => write_tables(dir, &rows)?,
                None => render_markdown(&rows),
            };
            print!("{md}");
        }
    }
    Ok(())
}

fn read_traces(dir: &Path) -> Result<Vec<PipelineTrace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(PipelineTrace::read_from(p)?)).collect()
}

fn rescore(label: &str, traces: &[PipelineTrace], samples: &[BenchmarkSample]) -> Result<ReportRow> {
    let results: Vec<SampleResult> = traces
        .iter()
        .map(|t| {
            t.scoring
                .clone()
                .ok_or_else(|| anyhow!("trace {} was written without scoring", t.sample_id))
        })
        .collect::<Result<_>>()?;
    let ids: std::collections::HashSet<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
    let present: Vec<BenchmarkSample> = samples
        .iter()
        .filter(|s| ids.contains(s.id.as_str()))
        .cloned()
        .collect();
    Ok(ReportRow::new(label, score(&results, &present)?))
}

/// One row for a flat trace directory, or one per subdirectory.
fn report_rows(dir: &Path, samples: &[BenchmarkSample]) -> Result<Vec<ReportRow>> {
    let flat = read_traces(dir)?;
    if !flat.is_empty() {
        let label = dir
            .file_name()
            .map_or_else(|| "traces".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![rescore(&label, &flat, samples)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort_by_key(|p| {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let budget = name.strip_prefix("budget-").and_then(|n| n.parse::<usize>().ok());
        (budget.unwrap_or(usize::MAX), name)
    });
    let mut rows = Vec::new();
    for sub in subdirs {
        let traces = read_traces(&sub)?;
        if !traces.is_empty() {
            rows.push(rescore(
                &sub.file_name().unwrap_or_default().to_string_lossy(),
                &traces,
                samples,
            )?);
        }
    }
    if rows.is_empty() {
        bail!("no traces found under {}", dir.display());
    }
    Ok(rows)
}
