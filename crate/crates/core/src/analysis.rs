//! Diagnostics over which formats solve which instances.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::answer::{exact_match, MetricError};
use crate::classifier::LabelRecord;
use crate::execution::ReasoningOutcome;
use crate::formats::TabularFormat;
use crate::table::Instance;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("no outcome for instance {instance_id:?} in format {format}")]
    MissingOutcome { instance_id: String, format: TabularFormat },
    #[error("malformed matrix: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

/// Instances by formats; `cells[i][f]` is true when format `f` solved
/// instance `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessMatrix {
    pub instance_ids: Vec<String>,
    pub formats: Vec<TabularFormat>,
    pub cells: Vec<Vec<bool>>,
}

impl CorrectnessMatrix {
    pub fn new(
        instance_ids: Vec<String>,
        formats: Vec<TabularFormat>,
        cells: Vec<Vec<bool>>,
    ) -> Result<Self, AnalysisError> {
        if instance_ids.len() != cells.len() {
            return Err(AnalysisError::Shape(format!(
                "{} ids for {} rows",
                instance_ids.len(),
                cells.len()
            )));
        }
        if let Some((i, row)) = cells.iter().enumerate().find(|(_, r)| r.len() != formats.len()) {
            return Err(AnalysisError::Shape(format!(
                "row {i} has {} cells, expected {}",
                row.len(),
                formats.len()
            )));
        }
        Ok(CorrectnessMatrix {
            instance_ids,
            formats,
            cells,
        })
    }

    /// Builds the grid from sample-0 outcomes.
    pub fn from_outcomes(
        instances: &[Instance],
        outcomes: &[ReasoningOutcome],
        formats: &[TabularFormat],
    ) -> Result<Self, AnalysisError> {
        let index: HashMap<(&str, TabularFormat), &ReasoningOutcome> = outcomes
            .iter()
            .filter(|o| o.sample_index == 0)
            .map(|o| ((o.instance_id.as_str(), o.format), o))
            .collect();
        let mut cells = Vec::with_capacity(instances.len());
        for inst in instances {
            let row = formats
                .iter()
                .map(|&f| {
                    let o = index
                        .get(&(inst.id.as_str(), f))
                        .ok_or_else(|| AnalysisError::MissingOutcome {
                            instance_id: inst.id.clone(),
                            format: f,
                        })?;
                    Ok(o.answer.as_ref().is_some_and(|a| exact_match(a, &inst.gold_answers)))
                })
                .collect::<Result<Vec<bool>, AnalysisError>>()?;
            cells.push(row);
        }
        Self::new(
            instances.iter().map(|i| i.id.clone()).collect(),
            formats.to_vec(),
            cells,
        )
    }

    pub fn from_labels(records: &[LabelRecord], formats: &[TabularFormat]) -> Result<Self, AnalysisError> {
        Self::new(
            records.iter().map(|r| r.instance_id.clone()).collect(),
            formats.to_vec(),
            records
                .iter()
                .map(|r| r.labels.iter().map(|b| *b == 1).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn solved(&self, f: usize) -> usize {
        self.cells.iter().filter(|r| r[f]).count()
    }

    pub fn format_accuracy(&self) -> Result<Vec<f64>, MetricError> {
        if self.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = self.len() as f64;
        Ok((0..self.formats.len()).map(|f| self.solved(f) as f64 / n).collect())
    }

    /// Correct counts per format, for one row of a chi-square table.
    pub fn correct_counts(&self) -> Vec<u64> {
        (0..self.formats.len()).map(|f| self.solved(f) as u64).collect()
    }
}

/// `cell[v][h]` = share of instances solved by `h` that `v` also solves;
/// `None` when `h` solves nothing.
pub fn overlap_matrix(m: &CorrectnessMatrix) -> Vec<Vec<Option<f64>>> {
    let n = m.formats.len();
    (0..n)
        .map(|v| {
            (0..n)
                .map(|h| {
                    let base = m.solved(h);
                    (base > 0).then(|| {
                        let both = m.cells.iter().filter(|r| r[v] && r[h]).count();
                        both as f64 / base as f64
                    })
                })
                .collect()
        })
        .collect()
}

/// Share of each format's solved instances that no other format solves.
pub fn unique_solve_share(m: &CorrectnessMatrix) -> Vec<Option<f64>> {
    (0..m.formats.len())
        .map(|f| {
            let base = m.solved(f);
            (base > 0).then(|| {
                let only = m
                    .cells
                    .iter()
                    .filter(|r| r[f] && r.iter().filter(|c| **c).count() == 1)
                    .count();
                only as f64 / base as f64
            })
        })
        .collect()
}

/// Fraction of instances some format solves.
pub fn oracle_accuracy(m: &CorrectnessMatrix) -> Result<f64, MetricError> {
    if m.is_empty() {
        return Err(MetricError::Empty);
    }
    let hit = m.cells.iter().filter(|r| r.iter().any(|c| *c)).count();
    Ok(hit as f64 / m.len() as f64)
}

/// Expected frequencies for the chi-square test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    /// Column mean across models, the same for every model.
    #[default]
    Paper,
    /// Row total times column total over the grand total.
    Contingency,
}

impl FromStr for Expectation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" | "mean" => Ok(Expectation::Paper),
            "contingency" => Ok(Expectation::Contingency),
            other => Err(format!("unknown expectation {other:?} (expected paper or contingency)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
    pub expectation: Expectation,
}

impl ChiSquareResult {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// Chi-square over a models-by-formats table of correct counts.
pub fn chi_square(counts: &[Vec<u64>], expectation: Expectation) -> Result<ChiSquareResult, AnalysisError> {
    let n_m = counts.len();
    let n_r = counts.first().map_or(0, Vec::len);
    if n_m < 2 || n_r < 2 {
        return Err(AnalysisError::Degenerate(format!(
            "need at least 2 models and 2 formats, got {n_m}x{n_r}"
        )));
    }
    if let Some(i) = counts.iter().position(|r| r.len() != n_r) {
        return Err(AnalysisError::Shape(format!(
            "model row {i} has {} cells, expected {n_r}",
            counts[i].len()
        )));
    }
    let col_sum: Vec<f64> = (0..n_r).map(|j| counts.iter().map(|r| r[j] as f64).sum()).collect();
    let row_sum: Vec<f64> = counts.iter().map(|r| r.iter().map(|&x| x as f64).sum()).collect();
    let total: f64 = row_sum.iter().sum();
    let mut statistic = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = match expectation {
                Expectation::Paper => col_sum[j] / n_m as f64,
                Expectation::Contingency => {
                    if total == 0.0 {
                        0.0
                    } else {
                        row_sum[i] * col_sum[j] / total
                    }
                }
            };
            if e <= 0.0 {
                return Err(AnalysisError::Degenerate(format!(
                    "zero expected frequency at model {i}, format {j}"
                )));
            }
            statistic += (o as f64 - e).powi(2) / e;
        }
    }
    let dof = ((n_m - 1) * (n_r - 1)) as u64;
    let dist = ChiSquared::new(dof as f64).map_err(|e| AnalysisError::Degenerate(e.to_string()))?;
    let p_value = dist.sf(statistic).clamp(0.0, 1.0);
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value,
        expectation,
    })
}

/// Each format's share of all positive labels.
pub fn label_proportions(records: &[LabelRecord]) -> Result<Vec<f64>, MetricError> {
    let width = records.first().map_or(0, |r| r.labels.len());
    let mut per = vec![0u64; width];
    for r in records {
        for (slot, &b) in per.iter_mut().zip(&r.labels) {
            *slot += u64::from(b);
        }
    }
    let total: u64 = per.iter().sum();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    Ok(per.iter().map(|&c| c as f64 / total as f64).collect())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Fixed,
    Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub name: String,
    pub kind: RowKind,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatShare {
    pub format: TabularFormat,
    pub share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub formats: Vec<TabularFormat>,
    pub cells: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub method: String,
    pub best_fixed: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    #[serde(flatten)]
    pub result: ChiSquareResult,
    pub models: Vec<String>,
    pub significance_level: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub accuracy: Vec<AccuracyRow>,
    pub overlap: Option<Overlap>,
    pub unique_share: Option<Vec<FormatShare>>,
    pub oracle: Option<f64>,
    pub chi_square: Option<ChiSquareReport>,
    pub label_proportions: Option<Vec<FormatShare>>,
    pub delta: Vec<Delta>,
}

/// Everything a report can be built from; absent parts become "no data".
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub matrix: Option<CorrectnessMatrix>,
    /// Named method accuracies such as `vote` or `single`.
    pub methods: Vec<(String, f64)>,
    pub labels: Option<(Vec<TabularFormat>, Vec<LabelRecord>)>,
    /// Per-model correct counts with model names.
    pub chi_square: Option<(Vec<String>, ChiSquareResult)>,
}

pub fn build_report(inputs: &ReportInputs) -> Report {
    let mut accuracy = Vec::new();
    let mut overlap = None;
    let mut unique_share = None;
    let mut oracle = None;
    if let Some(m) = inputs.matrix.as_ref().filter(|m| !m.is_empty()) {
        let acc = m.format_accuracy().expect("non-empty");
        for (f, a) in m.formats.iter().zip(acc) {
            accuracy.push(AccuracyRow {
                name: f.to_string(),
                kind: RowKind::Fixed,
                accuracy: a,
            });
        }
        overlap = Some(Overlap {
            formats: m.formats.clone(),
            cells: overlap_matrix(m),
        });
        unique_share = Some(
            m.formats
                .iter()
                .zip(unique_solve_share(m))
                .map(|(&format, share)| FormatShare { format, share })
                .collect(),
        );
        oracle = oracle_accuracy(m).ok();
    }
    let best_fixed = accuracy
        .iter()
        .fold(None::<&AccuracyRow>, |best, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .cloned();
    let mut delta = Vec::new();
    for (name, acc) in &inputs.methods {
        accuracy.push(AccuracyRow {
            name: name.clone(),
            kind: RowKind::Method,
            accuracy: *acc,
        });
        if let Some(best) = &best_fixed {
            delta.push(Delta {
                method: name.clone(),
                best_fixed: best.name.clone(),
                delta: acc - best.accuracy,
            });
        }
    }
    let label_proportions = inputs.labels.as_ref().and_then(|(formats, records)| {
        label_proportions(records).ok().map(|shares| {
            formats
                .iter()
                .zip(shares)
                .map(|(&format, s)| FormatShare { format, share: Some(s) })
                .collect()
        })
    });
    let chi_square = inputs.chi_square.as_ref().map(|(models, r)| ChiSquareReport {
        result: r.clone(),
        models: models.clone(),
        significance_level: SIGNIFICANCE_LEVEL,
        significant: r.significant(),
    });
    Report {
        schema_version: REPORT_SCHEMA_VERSION,
        accuracy,
        overlap,
        unique_share,
        oracle,
        chi_square,
        label_proportions,
        delta,
    }
}

const NO_DATA: &str = "  no data\n";

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

pub fn render_text(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "report schema {}", report.schema_version);

    s.push_str("\naccuracy (%)\n");
    if report.accuracy.is_empty() {
        s.push_str(NO_DATA);
    } else {
        let _ = writeln!(s, "  {:<20} {:<8} {:>8}", "name", "kind", "acc");
        for r in &report.accuracy {
            let kind = match r.kind {
                RowKind::Fixed => "fixed",
                RowKind::Method => "method",
            };
            let _ = writeln!(s, "  {:<20} {:<8} {:>8}", r.name, kind, pct(Some(r.accuracy)));
        }
        for d in &report.delta {
            let _ = writeln!(
                s,
                "  {:<20} {:<8} {:>+8.2}",
                format!("delta {}", d.method),
                d.best_fixed,
                d.delta * 100.0
            );
        }
    }

    s.push_str("\noracle (%)\n");
    match report.oracle {
        Some(o) => {
            let _ = writeln!(s, "  {:>8}", pct(Some(o)));
        }
        None => s.push_str(NO_DATA),
    }

    s.push_str("\noverlap (row solves column's instances, %)\n");
    match &report.overlap {
        Some(o) => {
            let _ = write!(s, "  {:<10}", "");
            for f in &o.formats {
                let _ = write!(s, " {:>9}", f.as_str());
            }
            s.push('\n');
            for (f, row) in o.formats.iter().zip(&o.cells) {
                let _ = write!(s, "  {:<10}", f.as_str());
                for c in row {
                    let _ = write!(s, " {:>9}", pct(*c));
                }
                s.push('\n');
            }
        }
        None => s.push_str(NO_DATA),
    }

    let shares = |s: &mut String, title: &str, rows: &Option<Vec<FormatShare>>| {
        let _ = writeln!(s, "\n{title}");
        match rows {
            Some(rows) => {
                for r in rows {
                    let _ = writeln!(s, "  {:<10} {:>8}", r.format.as_str(), pct(r.share));
                }
            }
            None => s.push_str(NO_DATA),
        }
    };
    shares(&mut s, "unique solve share (%)", &report.unique_share);
    shares(&mut s, "label proportions (%)", &report.label_proportions);

    s.push_str("\nchi-square across models\n");
    match &report.chi_square {
        Some(c) => {
            let _ = writeln!(s, "  models      {}", c.models.join(", "));
            let _ = writeln!(
                s,
                "  expectation {}",
                serde_json::to_value(c.result.expectation)
                    .unwrap()
                    .as_str()
                    .unwrap_or("")
            );
            let _ = writeln!(s, "  statistic   {:.6}", c.result.statistic);
            let _ = writeln!(s, "  dof         {}", c.result.dof);
            let _ = writeln!(s, "  p-value     {:.6}", c.result.p_value);
            let _ = writeln!(s, "  p < {}    {}", c.significance_level, c.significant);
        }
        None => s.push_str(NO_DATA),
    }
    s
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(), AnalysisError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("report.txt"), render_text(report))?;
    Ok(())
}
