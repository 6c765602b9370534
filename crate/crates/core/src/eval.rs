//! Confusion counts, accuracy/precision/recall/F1 and trial aggregation.
//!
//! Occupied is the positive class throughout.

use std::fmt::Write as _;
use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Tallies predictions against labels (`true` = occupied).
pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("cannot score an empty sample".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Ratios whose denominators were zero and were therefore reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: UndefinedFlags,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den > 0.0 {
        (num / den, false)
    } else {
        (0.0, true)
    }
}

/// Accuracy, precision `tp/(tp+fp)`, recall `tp/(tp+fn)` and their
/// harmonic mean. Zero denominators yield 0 with the matching flag set.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let total = c.total() as f64;
    let accuracy = if total > 0.0 { (c.tp + c.tn) as f64 / total } else { 0.0 };
    let (precision, p_undef) = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let (recall, r_undef) = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let (f1, f_undef) = ratio(2.0 * precision * recall, precision + recall);
    Metrics {
        accuracy,
        precision,
        recall,
        f1,
        undefined: UndefinedFlags {
            precision: p_undef,
            recall: r_undef,
            f1: f_undef,
        },
    }
}

/// Positive-class F1 of a prediction vector, 0 when undefined.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    Ok(metrics(&confusion(predictions, labels)?).f1)
}

/// Test-set scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case: String,
    pub model: String,
    pub seed: u64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsRecord {
    pub fn new(case: &str, model: &str, seed: u64, m: &Metrics) -> Self {
        MetricsRecord {
            case: case.into(),
            model: model.into(),
            seed,
            acc: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub runs: usize,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Means per case (in first-seen order) for one model, and the mean of
/// those means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub cases: Vec<CaseSummary>,
    pub average_acc: f64,
    pub average_f1: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Groups records by model, then by case.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut by_model: IndexMap<&str, IndexMap<&str, Vec<&MetricsRecord>>> = IndexMap::new();
    for r in records {
        by_model
            .entry(&r.model)
            .or_default()
            .entry(&r.case)
            .or_default()
            .push(r);
    }
    by_model
        .into_iter()
        .map(|(model, cases)| {
            let cases: Vec<CaseSummary> = cases
                .into_iter()
                .map(|(case, rs)| CaseSummary {
                    case: case.into(),
                    runs: rs.len(),
                    acc: mean(rs.iter().map(|r| r.acc)),
                    precision: mean(rs.iter().map(|r| r.precision)),
                    recall: mean(rs.iter().map(|r| r.recall)),
                    f1: mean(rs.iter().map(|r| r.f1)),
                })
                .collect();
            Aggregate {
                model: model.into(),
                average_acc: average_of_case_means(cases.iter().map(|c| c.acc)),
                average_f1: average_of_case_means(cases.iter().map(|c| c.f1)),
                cases,
            }
        })
        .collect()
}

/// The "Average" row: an unweighted mean over per-case means.
pub fn average_of_case_means(case_means: impl IntoIterator<Item = f64>) -> f64 {
    mean(case_means)
}

pub const RESULTS_HEADER: [&str; 7] = ["case", "model", "seed", "acc", "precision", "recall", "f1"];

pub fn write_results_csv(records: &[MetricsRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing results: {e}"));
    w.write_record(RESULTS_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.case.clone(),
            r.model.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.acc),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing results: {e}")))?;
    Ok(())
}

/// Plain-text table with one ACC and one F1 row per case, a closing
/// Average block and one column per model.
pub fn summary_table(aggregates: &[Aggregate]) -> String {
    let mut cases: Vec<&str> = Vec::new();
    for a in aggregates {
        for c in &a.cases {
            if !cases.contains(&c.case.as_str()) {
                cases.push(&c.case);
            }
        }
    }
    let case_width = cases.iter().map(|c| c.len()).chain([7]).max().unwrap_or(7);
    let col_width = aggregates.iter().map(|a| a.model.len()).chain([6]).max().unwrap_or(6);
    let mut out = String::new();
    let _ = write!(out, "{:<case_width$}  {:<6}", "Case", "Metric");
    for a in aggregates {
        let _ = write!(out, "  {:>col_width$}", a.model);
    }
    out.push('\n');
    let rule = case_width + 8 + aggregates.len() * (col_width + 2);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let cell = |a: &Aggregate, case: &str, f1: bool| {
        a.cases
            .iter()
            .find(|c| c.case == case)
            .map_or_else(|| "-".to_string(), |c| format!("{:.4}", if f1 { c.f1 } else { c.acc }))
    };
    for case in &cases {
        for (label, f1) in [("ACC", false), ("F1", true)] {
            let name = if f1 { "" } else { case };
            let _ = write!(out, "{name:<case_width$}  {label:<6}");
            for a in aggregates {
                let _ = write!(out, "  {:>col_width$}", cell(a, case, f1));
            }
            out.push('\n');
        }
    }
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (label, f1) in [("ACC", false), ("F1", true)] {
        let name = if f1 { "" } else { "Average" };
        let _ = write!(out, "{name:<case_width$}  {label:<6}");
        for a in aggregates {
            let v = if f1 { a.average_f1 } else { a.average_acc };
            let _ = write!(out, "  {:>col_width$}", format!("{v:.4}"));
        }
        out.push('\n');
    }
    out
}
