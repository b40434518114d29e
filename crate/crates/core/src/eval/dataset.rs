use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EvalError;
use crate::evidence::{AudioRef, Question};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSample {
    pub id: String,
    pub audio: AudioRef,
    pub question: Question,
    pub ground_truth: String,
    pub category: String,
    pub difficulty: Option<String>,
}

impl BenchmarkSample {
    pub fn new(
        id: impl Into<String>,
        audio: AudioRef,
        question: Question,
        ground_truth: impl Into<String>,
        category: impl Into<String>,
        difficulty: Option<String>,
    ) -> Result<Self, String> {
        let id = id.into();
        let ground_truth = ground_truth.into();
        let category = category.into();
        if id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if category.trim().is_empty() {
            return Err("category is empty".into());
        }
        if question.index_of(&ground_truth).is_none() {
            return Err(format!("answer {ground_truth:?} is not one of the choices"));
        }
        let mut metadata = question.metadata.clone();
        metadata.insert("category".into(), category.clone());
        if let Some(d) = &difficulty {
            metadata.insert("difficulty".into(), d.clone());
        }
        Ok(Self {
            id,
            audio,
            question: question.with_metadata(metadata),
            ground_truth,
            category,
            difficulty: difficulty.filter(|d| !d.trim().is_empty()),
        })
    }

    pub fn ground_truth_index(&self) -> usize {
        self.question
            .index_of(&self.ground_truth)
            .expect("validated at construction")
    }
}

/// One line of the JSONL dataset format.
#[derive(Debug, Deserialize)]
struct SampleLine {
    id: Value,
    audio: String,
    #[serde(default)]
    media_type: Option<String>,
    #[serde(default)]
    duration_s: Option<f64>,
    question: String,
    choices: Vec<String>,
    answer: String,
    category: String,
    #[serde(default)]
    difficulty: Option<String>,
}

fn id_string(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("id must be a string or number, got {other}")),
    }
}

impl SampleLine {
    fn into_sample(self) -> Result<BenchmarkSample, String> {
        let audio = AudioRef::new(self.audio, self.media_type, self.duration_s).map_err(|e| e.to_string())?;
        let question = Question::new(self.question, self.choices).map_err(|e| e.to_string())?;
        BenchmarkSample::new(
            id_string(&self.id)?,
            audio,
            question,
            self.answer,
            self.category,
            self.difficulty,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub samples: Vec<BenchmarkSample>,
    pub rejections: Vec<Rejection>,
}

fn finish(samples: Vec<BenchmarkSample>, rejections: Vec<Rejection>) -> Result<LoadedDataset, EvalError> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for s in &samples {
        if !seen.insert(s.id.as_str()) {
            dups.insert(s.id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(EvalError::DuplicateId(dups.into_iter().collect()));
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset {
            rejected: rejections.len(),
        });
    }
    Ok(LoadedDataset { samples, rejections })
}

/// Parses JSONL text; blank lines are skipped, invalid lines rejected.
pub fn parse_dataset(text: &str) -> Result<LoadedDataset, EvalError> {
    let mut samples = Vec::new();
    let mut rejections = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SampleLine>(line)
            .map_err(|e| e.to_string())
            .and_then(SampleLine::into_sample);
        match parsed {
            Ok(s) => samples.push(s),
            Err(reason) => rejections.push(Rejection { line: i + 1, reason }),
        }
    }
    finish(samples, rejections)
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::FileNotFound {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

fn adapt_array(text: &str, audio_root: &Path, audio_key: &str, category_key: &str) -> Result<LoadedDataset, EvalError> {
    let items: Vec<BTreeMap<String, Value>> =
        serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))?;
    let mut samples = Vec::new();
    let mut rejections = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let get = |k: &str| item.get(k).and_then(Value::as_str).map(str::to_string);
        let built = (|| {
            let id = item
                .get("id")
                .ok_or("missing id")
                .map_err(String::from)
                .and_then(id_string)?;
            let audio = get(audio_key).ok_or(format!("missing {audio_key}"))?;
            let audio = audio_root.join(audio.trim_start_matches("./"));
            let choices: Vec<String> = item
                .get("choices")
                .and_then(Value::as_array)
                .ok_or("missing choices")?
                .iter()
                .map(|c| c.as_str().map(str::to_string).ok_or("non-string choice"))
                .collect::<Result<_, _>>()?;
            let audio = AudioRef::new(audio.to_string_lossy(), None, None).map_err(|e| e.to_string())?;
            let question =
                Question::new(get("question").ok_or("missing question")?, choices).map_err(|e| e.to_string())?;
            let mut metadata = BTreeMap::new();
            for key in ["sub-category", "category", "task", "modality", "dataset"] {
                if let Some(v) = get(key) {
                    metadata.insert(key.to_string(), v);
                }
            }
            BenchmarkSample::new(
                id,
                audio,
                question.with_metadata(metadata),
                get("answer").ok_or("missing answer")?,
                get(category_key).ok_or(format!("missing {category_key}"))?,
                get("difficulty"),
            )
        })();
        match built {
            Ok(s) => samples.push(s),
            Err(reason) => rejections.push(Rejection { line: i + 1, reason }),
        }
    }
    finish(samples, rejections)
}

/// Converts an MMAU-style JSON array (`audio_id`, `task` as category).
pub fn adapt_mmau(text: &str, audio_root: &Path) -> Result<LoadedDataset, EvalError> {
    adapt_array(text, audio_root, "audio_id", "task")
}

/// Converts an MMAR-style JSON array (`audio_path`, `modality` as category).
pub fn adapt_mmar(text: &str, audio_root: &Path) -> Result<LoadedDataset, EvalError> {
    adapt_array(text, audio_root, "audio_path", "modality")
}
