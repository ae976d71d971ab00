use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentKind, MemorizationResult};
use crate::error::{Error, Result};
use crate::trainer::RunReport;

/// Literature values shipped with the crate.
pub const DEFAULT_LITERATURE: &str = include_str!("../../data/literature.toml");

/// One finished run as stored in `runs/<dir>/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub r: usize,
    pub seed: u64,
    /// Relative to the experiment directory.
    pub run_dir: String,
    pub report: RunReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memorization: Option<MemorizationResult>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// `experiment,R,seed,clean_acc,robust_acc,wallclock_s`, one row per record
/// in the given order. With `zero_wallclock` the timing column is 0.
pub fn summary_csv(records: &[RunRecord], zero_wallclock: bool) -> String {
    let mut out = String::from("experiment,R,seed,clean_acc,robust_acc,wallclock_s\n");
    for r in records {
        let wall = if zero_wallclock { 0.0 } else { r.report.wallclock_s };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.experiment,
            r.r,
            r.seed,
            pct(r.report.final_clean_acc),
            pct(r.report.final_robust_acc),
            wall
        );
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-R means over seeds as an aligned text table.
pub fn render_table(records: &[RunRecord]) -> String {
    let mut by_r: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_r.entry(r.r).or_default().push(r);
    }
    let mut out = String::new();
    if let Some(first) = records.first() {
        let _ = writeln!(out, "experiment: {} ({})", first.experiment, first.kind.as_str());
    }
    let memo = records.iter().any(|r| r.memorization.is_some());
    let _ = write!(out, "{:>6}  {:>5}  {:>9}  {:>10}", "R", "seeds", "clean (%)", "robust (%)");
    if memo {
        let _ = write!(out, "  {:>8}", "learned");
    }
    out.push('\n');
    for (r, rows) in by_r {
        let clean: Vec<f64> = rows.iter().filter_map(|x| x.report.final_clean_acc).collect();
        let robust: Vec<f64> = rows.iter().filter_map(|x| x.report.final_robust_acc).collect();
        let _ = write!(
            out,
            "{r:>6}  {:>5}  {:>9}  {:>10}",
            rows.len(),
            pct(mean(&clean)),
            pct(mean(&robust))
        );
        if memo {
            let f: Vec<f64> = rows
                .iter()
                .filter_map(|x| x.memorization.as_ref().map(|m| m.fraction_learned))
                .collect();
            let _ = write!(out, "  {:>8}", mean(&f).map(|v| format!("{v:.3}")).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

/// Reads every `runs/*/report.json` under an experiment directory, sorted by
/// (R, seed).
pub fn load_run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = dir.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::Ingestion {
        path: runs.clone(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path().join("report.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    out.sort_by_key(|r| (r.r, r.seed));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiteratureRow {
    pub method: String,
    pub clean: f64,
    pub robust: f64,
    pub citation: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiteratureTarget {
    pub method: String,
    pub clean: f64,
    pub robust: f64,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Literature {
    #[serde(default)]
    pub row: Vec<LiteratureRow>,
    #[serde(default)]
    pub target: Vec<LiteratureTarget>,
}

pub fn literature_from_toml(text: &str) -> Result<Literature> {
    toml::from_str(text).map_err(|e| Error::config(format!("literature file: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowSource {
    /// Computed here; the run directory holding its report.
    Computed(String),
    Literature(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub clean: Option<f64>,
    pub robust: Option<f64>,
    pub source: RowSource,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub targets: Vec<LiteratureTarget>,
}

/// One row per report followed by the literature rows, which are flagged.
pub fn compare_report(reports: &[RunRecord], literature: &Literature) -> ComparisonTable {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            method: format!("{} {} (R={}, seed {})", r.experiment, r.kind.as_str(), r.r, r.seed),
            clean: r.report.final_clean_acc,
            robust: r.report.final_robust_acc,
            source: RowSource::Computed(r.run_dir.clone()),
            note: None,
        })
        .collect();
    rows.extend(literature.row.iter().map(|l| ComparisonRow {
        method: l.method.clone(),
        clean: Some(l.clean),
        robust: Some(l.robust),
        source: RowSource::Literature(l.citation.clone()),
        note: l.note.clone(),
    }));
    ComparisonTable {
        rows,
        targets: literature.target.clone(),
    }
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>9}  {:>10}  source\n", "method", "clean (%)", "robust (%)");
        let mut notes = Vec::new();
        for r in &self.rows {
            let source = match &r.source {
                RowSource::Computed(dir) => format!("computed: {dir}"),
                RowSource::Literature(c) => format!("[literature] {c}"),
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>10}  {source}",
                r.method,
                pct(r.clean),
                pct(r.robust)
            );
            if let Some(n) = &r.note {
                notes.push(format!("{}: {n}", r.method));
            }
        }
        if !self.targets.is_empty() {
            out.push_str("\nreference targets (full scale, literature values):\n");
            for t in &self.targets {
                let _ = writeln!(out, "  {:<20} {:>6.2} / {:>6.2}", t.method, t.clean, t.robust);
                if let Some(n) = &t.note {
                    notes.push(format!("{}: {n}", t.method));
                }
            }
        }
        if !notes.is_empty() {
            out.push_str("\nnotes:\n");
            for n in notes {
                let _ = writeln!(out, "  {n}");
            }
        }
        out
    }
}
