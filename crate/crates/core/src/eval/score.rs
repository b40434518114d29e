use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BenchmarkSample, EvalError, SampleResult};
use crate::evidence::option_letter;

/// Correct over total. `accuracy` is a percentage, `None` for an empty cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

impl Cell {
    pub fn new(correct: usize, total: usize) -> Self {
        assert!(correct <= total, "cell numerator exceeds denominator");
        Self {
            correct,
            total,
            accuracy: (total > 0).then(|| 100.0 * correct as f64 / total as f64),
        }
    }
}

/// Raw and post-processed accuracy side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualCell {
    pub raw: Cell,
    pub post: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub key: String,
    pub cell: DualCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_results: usize,
    pub overall: DualCell,
    pub by_category: Vec<GroupCell>,
    pub by_difficulty: Vec<GroupCell>,
    pub degraded: usize,
}

pub(crate) const CATEGORY_ORDER: &[&str] = &[
    "sound",
    "music",
    "speech",
    "sound-music",
    "sound-speech",
    "music-speech",
    "sound-music-speech",
];
pub(crate) const DIFFICULTY_ORDER: &[&str] = &["easy", "medium", "hard"];

/// Known keys first in table order, then the rest alphabetically.
pub(crate) fn ordered(keys: impl IntoIterator<Item = String>, canonical: &[&str]) -> Vec<String> {
    let mut keys: Vec<String> = keys.into_iter().collect::<HashSet<_>>().into_iter().collect();
    keys.sort_by_key(|k| {
        let rank = canonical
            .iter()
            .position(|c| c.eq_ignore_ascii_case(k))
            .unwrap_or(canonical.len());
        (rank, k.clone())
    });
    keys
}

#[derive(Default, Clone, Copy)]
struct Tally {
    raw: usize,
    post: usize,
    total: usize,
}

impl Tally {
    fn cell(self) -> DualCell {
        DualCell {
            raw: Cell::new(self.raw, self.total),
            post: Cell::new(self.post, self.total),
        }
    }
}

/// Aggregates results into overall, per-category and per-difficulty cells.
/// Groups present in `samples` but without results report `0/0`.
pub fn score(results: &[SampleResult], samples: &[BenchmarkSample]) -> Result<AggregateReport, EvalError> {
    let by_id: HashMap<&str, &BenchmarkSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = HashSet::new();
    let mut overall = Tally::default();
    let mut cats: BTreeMap<String, Tally> = BTreeMap::new();
    let mut diffs: BTreeMap<String, Tally> = BTreeMap::new();
    for s in samples {
        cats.entry(s.category.clone()).or_default();
        if let Some(d) = &s.difficulty {
            diffs.entry(d.clone()).or_default();
        }
    }
    let mut degraded = 0;
    for r in results {
        let sample = by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(format!("result {} has no sample", r.sample_id)))?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(EvalError::IdMismatch(format!("duplicate result for {}", r.sample_id)));
        }
        let gt = Some(sample.ground_truth_index());
        let raw_ok = r.matched_index == gt;
        let post_ok = r.resolved_index() == gt;
        let bump = |t: &mut Tally| {
            t.total += 1;
            t.raw += raw_ok as usize;
            t.post += post_ok as usize;
        };
        bump(&mut overall);
        bump(cats.get_mut(&sample.category).expect("category registered"));
        if let Some(d) = &sample.difficulty {
            bump(diffs.get_mut(d).expect("difficulty registered"));
        }
        degraded += r.degraded as usize;
    }
    let groups = |m: &BTreeMap<String, Tally>, order: &[&str]| {
        ordered(m.keys().cloned(), order)
            .into_iter()
            .map(|k| GroupCell {
                cell: m[&k].cell(),
                key: k,
            })
            .collect::<Vec<_>>()
    };
    Ok(AggregateReport {
        n_results: results.len(),
        overall: overall.cell(),
        by_category: groups(&cats, CATEGORY_ORDER),
        by_difficulty: groups(&diffs, DIFFICULTY_ORDER),
        degraded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub seed: u64,
    pub report: AggregateReport,
    /// Mean of `1 / |choices|`, as a percentage.
    pub expected_accuracy: f64,
    pub expected_by_category: Vec<(String, f64)>,
    pub results: Vec<SampleResult>,
}

fn expected(samples: &[&BenchmarkSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    100.0
        * samples
            .iter()
            .map(|s| 1.0 / s.question.choices.len() as f64)
            .sum::<f64>()
        / samples.len() as f64
}

/// Uniform random choice per sample, seeded.
pub fn random_baseline(samples: &[BenchmarkSample], seed: u64) -> BaselineReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results: Vec<SampleResult> = samples
        .iter()
        .map(|s| {
            let pick = rng.random_range(0..s.question.choices.len());
            SampleResult::new(
                s.id.clone(),
                format!("The final answer is {}", option_letter(pick)),
                Some(pick),
                None,
                s.ground_truth_index(),
            )
        })
        .collect();
    let report = score(&results, samples).expect("results built from samples");
    let all: Vec<&BenchmarkSample> = samples.iter().collect();
    let expected_by_category = report
        .by_category
        .iter()
        .map(|g| {
            let members: Vec<&BenchmarkSample> = samples.iter().filter(|s| s.category == g.key).collect();
            (g.key.clone(), expected(&members))
        })
        .collect();
    BaselineReport {
        seed,
        expected_accuracy: expected(&all),
        expected_by_category,
        report,
        results,
    }
}
