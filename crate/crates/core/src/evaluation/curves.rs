//! Coverage curves, subgroup tables and Sankey flows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{check_threshold, tally, EvalError, QuestionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub n_retained: usize,
    pub fraction_rejected: f64,
    /// `None` when nothing is retained.
    pub delta: Option<f64>,
}

/// One point per threshold; thresholds must be non-increasing.
pub fn coverage_curve(results: &[QuestionResult], thresholds: &[f64]) -> Result<Vec<CurvePoint>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    if thresholds.windows(2).any(|w| w[1] > w[0]) {
        return Err(EvalError::NotDescending);
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (n, correct, n_retained, retained_correct) = tally(results, threshold);
            let delta = (n_retained > 0).then(|| {
                100.0 * retained_correct as f64 / n_retained as f64 - 100.0 * correct as f64 / n as f64
            });
            CurvePoint {
                threshold,
                n_retained,
                fraction_rejected: 1.0 - n_retained as f64 / n as f64,
                delta,
            }
        })
        .collect())
}

/// Thresholds from the first tenth at or above `log10(k)` down to zero in
/// steps of 0.1 (1.2, 1.1, …, 0.0 for k = 15).
pub fn default_curve_thresholds(k: usize) -> Vec<f64> {
    let max = (k.max(1) as f64).log10();
    let top = (max * 10.0 - 1e-9).ceil().max(0.0) as i64;
    (0..=top).rev().map(|i| i as f64 / 10.0).collect()
}

/// Columns: threshold, fraction_rejected, delta, n_retained. An undefined
/// delta is written as `NA`.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,fraction_rejected,delta,n_retained\n");
    for p in points {
        let delta = p.delta.map(|d| format!("{d:.6}")).unwrap_or_else(|| "NA".into());
        writeln!(out, "{:.4},{:.6},{delta},{}", p.threshold, p.fraction_rejected, p.n_retained).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupCell {
    pub threshold: f64,
    pub n_answered: usize,
    pub n_correct: usize,
    /// Percent; `None` when no question is answered.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub dataset: String,
    pub subgroup: String,
    pub n: usize,
    pub baseline_correct: usize,
    pub baseline_accuracy: f64,
    pub cells: Vec<SubgroupCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub thresholds: Vec<f64>,
    pub rows: Vec<SubgroupRow>,
    pub notes: Vec<String>,
}

/// Baseline and gated accuracy per `(dataset, subgroup)`.
pub fn subgroup_report(results: &[QuestionResult], thresholds: &[f64]) -> Result<SubgroupReport, EvalError> {
    for &t in thresholds {
        check_threshold(t)?;
    }
    let mut groups: BTreeMap<(&str, &str), Vec<QuestionResult>> = BTreeMap::new();
    for r in results {
        groups.entry((&r.dataset, &r.subgroup)).or_default().push(r.clone());
    }
    let mut notes = Vec::new();
    let rows = groups
        .into_iter()
        .map(|((dataset, subgroup), members)| {
            let cells = thresholds
                .iter()
                .map(|&threshold| {
                    let (_, _, n_answered, n_correct) = tally(&members, threshold);
                    if n_answered == 0 {
                        notes.push(format!("{dataset}/{subgroup}: no questions answered at DSE <= {threshold}"));
                    }
                    SubgroupCell {
                        threshold,
                        n_answered,
                        n_correct,
                        accuracy: (n_answered > 0).then(|| 100.0 * n_correct as f64 / n_answered as f64),
                    }
                })
                .collect();
            let baseline_correct = members.iter().filter(|r| r.baseline_correct).count();
            SubgroupRow {
                dataset: dataset.to_string(),
                subgroup: subgroup.to_string(),
                n: members.len(),
                baseline_correct,
                baseline_accuracy: 100.0 * baseline_correct as f64 / members.len() as f64,
                cells,
            }
        })
        .collect();
    Ok(SubgroupReport {
        thresholds: thresholds.to_vec(),
        rows,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowTarget {
    AcceptedTrue,
    AcceptedFalse,
    RejectedTrue,
    RejectedFalse,
}

impl FlowTarget {
    pub fn label(self) -> &'static str {
        match self {
            FlowTarget::AcceptedTrue => "accepted-true",
            FlowTarget::AcceptedFalse => "accepted-false",
            FlowTarget::RejectedTrue => "rejected-true",
            FlowTarget::RejectedFalse => "rejected-false",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub source: String,
    pub target: FlowTarget,
    pub value: usize,
}

/// Nonzero subgroup → outcome counts at `threshold`.
pub fn sankey_export(results: &[QuestionResult], threshold: f64) -> Result<Vec<Flow>, EvalError> {
    check_threshold(threshold)?;
    let mut counts: BTreeMap<(&str, FlowTarget), usize> = BTreeMap::new();
    for r in results {
        let target = match (r.retained_at(threshold), r.baseline_correct) {
            (true, true) => FlowTarget::AcceptedTrue,
            (true, false) => FlowTarget::AcceptedFalse,
            (false, true) => FlowTarget::RejectedTrue,
            (false, false) => FlowTarget::RejectedFalse,
        };
        *counts.entry((&r.subgroup, target)).or_insert(0) += 1;
    }
    Ok(counts
        .into_iter()
        .map(|((source, target), value)| Flow {
            source: source.to_string(),
            target,
            value,
        })
        .collect())
}

/// `source,target,value` triples.
pub fn sankey_csv(flows: &[Flow]) -> String {
    let mut out = String::from("source,target,value\n");
    for f in flows {
        writeln!(out, "{},{},{}", csv_field(&f.source), f.target.label(), f.value).unwrap();
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
