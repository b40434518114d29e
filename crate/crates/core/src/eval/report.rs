use serde::{Deserialize, Serialize};

use super::score::{ordered, CATEGORY_ORDER, DIFFICULTY_ORDER};
use super::{AggregateReport, Cell, DualCell};

/// `correct / total` as a percentage with two decimals, rounded half up in
/// integer arithmetic. `"n/a"` for an empty cell.
pub fn format_pct(correct: usize, total: usize) -> String {
    if total == 0 {
        return "n/a".into();
    }
    let (c, t) = (correct as u128, total as u128);
    let hundredths = (c * 20_000 + t) / (2 * t);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn pct(cell: &Cell) -> String {
    format_pct(cell.correct, cell.total)
}

fn dual(cell: &DualCell) -> String {
    format!("{} / {}", pct(&cell.raw), pct(&cell.post))
}

/// One labelled line of a results table, e.g. a system or an iteration budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub report: AggregateReport,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, report: AggregateReport) -> Self {
        Self {
            label: label.into(),
            report,
        }
    }
}

fn columns(rows: &[ReportRow]) -> (Vec<String>, Vec<String>) {
    let cats = ordered(
        rows.iter()
            .flat_map(|r| r.report.by_category.iter().map(|g| g.key.clone())),
        CATEGORY_ORDER,
    );
    let diffs = ordered(
        rows.iter()
            .flat_map(|r| r.report.by_difficulty.iter().map(|g| g.key.clone())),
        DIFFICULTY_ORDER,
    );
    (cats, diffs)
}

fn lookup(groups: &[super::GroupCell], key: &str) -> String {
    groups
        .iter()
        .find(|g| g.key == key)
        .map_or_else(|| "n/a".into(), |g| dual(&g.cell))
}

/// Aligned-column Markdown with `raw / post` cells.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let (cats, diffs) = columns(rows);
    let mut header = vec!["System".to_string()];
    header.extend(cats.iter().cloned());
    header.extend(diffs.iter().cloned());
    header.extend(["Overall".to_string(), "N".to_string()]);

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.label.clone()];
            line.extend(cats.iter().map(|k| lookup(&r.report.by_category, k)));
            line.extend(diffs.iter().map(|k| lookup(&r.report.by_difficulty, k)));
            line.push(dual(&r.report.overall));
            line.push(r.report.n_results.to_string());
            line
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(body.iter())
                .map(|l| l[i].chars().count())
                .max()
                .unwrap_or(0)
                .max(3)
        })
        .collect();
    let fmt = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |", padded.join(" | "))
    };
    let mut out = vec![fmt(&header)];
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push(format!("|-{}-|", rule.join("-|-")));
    out.extend(body.iter().map(|l| fmt(l)));
    out.push(String::new());
    out.join("\n")
}

/// Long-format CSV: one record per (row, group), plus an `overall` record.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "system",
        "group",
        "key",
        "total",
        "raw_correct",
        "raw_pct",
        "post_correct",
        "post_pct",
    ])
    .expect("in-memory write");
    for r in rows {
        let groups = std::iter::once(("overall", "all", &r.report.overall))
            .chain(
                r.report
                    .by_category
                    .iter()
                    .map(|g| ("category", g.key.as_str(), &g.cell)),
            )
            .chain(
                r.report
                    .by_difficulty
                    .iter()
                    .map(|g| ("difficulty", g.key.as_str(), &g.cell)),
            );
        for (group, key, cell) in groups {
            w.write_record([
                r.label.as_str(),
                group,
                key,
                &cell.raw.total.to_string(),
                &cell.raw.correct.to_string(),
                &pct(&cell.raw),
                &cell.post.correct.to_string(),
                &pct(&cell.post),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
