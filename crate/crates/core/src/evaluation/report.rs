//! Assembles the evaluation report: per-dataset gating outcomes with
//! bootstrap statistics, subgroup tables, coverage curve and Sankey flows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    bootstrap_delta, coverage_curve, percent_display, sankey_export, selective_accuracy, subgroup_report,
    BootstrapConfig, BootstrapResult, CurvePoint, EvalError, FilterOutcome, Flow, QuestionResult, SubgroupReport,
};
use crate::entropy::format_rounded;
use crate::gateway::CostEstimate;

/// Dataset label for the pooled rows.
pub const COMBINED: &str = "Combined";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub thresholds: Vec<f64>,
    pub curve_thresholds: Vec<f64>,
    pub bootstrap: BootstrapConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    /// Threshold at or above the largest attainable entropy.
    pub no_filtering: bool,
    pub outcome: Option<FilterOutcome>,
    pub summary: String,
    pub bootstrap: Option<BootstrapResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub n: usize,
    pub baseline_correct: usize,
    pub baseline_accuracy: f64,
    pub thresholds: Vec<ThresholdSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub n_questions: usize,
    pub max_k: usize,
    /// Grade counts per grader label; automatic graders approximate expert review.
    pub graders: BTreeMap<String, usize>,
    pub datasets: Vec<DatasetSummary>,
    pub subgroups: SubgroupReport,
    pub curve: Vec<CurvePoint>,
    /// Flows keyed by the threshold as displayed.
    pub sankey: BTreeMap<String, Vec<Flow>>,
    pub cost: Option<CostEstimate>,
    pub notes: Vec<String>,
}

fn summarize(
    dataset: &str,
    results: &[QuestionResult],
    options: &ReportOptions,
    max_entropy: f64,
    notes: &mut Vec<String>,
) -> Result<DatasetSummary, EvalError> {
    let baseline_correct = results.iter().filter(|r| r.baseline_correct).count();
    let mut thresholds = Vec::new();
    for &t in &options.thresholds {
        let no_filtering = t >= max_entropy;
        let (outcome, bootstrap) = match selective_accuracy(results, t) {
            Ok(o) => (Some(o), Some(bootstrap_delta(results, t, &options.bootstrap)?)),
            Err(EvalError::EmptyRetained(_)) => {
                notes.push(format!("{dataset}: empty retained set at DSE <= {t}"));
                (None, None)
            }
            Err(e) => return Err(e),
        };
        let summary = match &outcome {
            Some(o) if no_filtering => format!("no filtering: {}", o.summary_line()),
            Some(o) => o.summary_line(),
            None => format!("empty retained set (n=0/{})", results.len()),
        };
        thresholds.push(ThresholdSummary {
            threshold: t,
            no_filtering,
            outcome,
            summary,
            bootstrap,
        });
    }
    Ok(DatasetSummary {
        dataset: dataset.to_string(),
        n: results.len(),
        baseline_correct,
        baseline_accuracy: 100.0 * baseline_correct as f64 / results.len() as f64,
        thresholds,
    })
}

/// Builds every table from the per-question results. Each dataset gets its
/// own rows; a pooled row follows when more than one dataset is present.
pub fn build_report(results: &[QuestionResult], options: &ReportOptions) -> Result<EvaluationReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    for r in results {
        r.validate()?;
    }
    let max_k = results.iter().map(|r| r.k).max().unwrap_or(1);
    let max_entropy = (max_k as f64).log10();
    let mut notes = Vec::new();

    let mut by_dataset: BTreeMap<&str, Vec<QuestionResult>> = BTreeMap::new();
    for r in results {
        by_dataset.entry(&r.dataset).or_default().push(r.clone());
    }
    let mut datasets = Vec::new();
    for (name, members) in &by_dataset {
        datasets.push(summarize(name, members, options, max_entropy, &mut notes)?);
    }
    if by_dataset.len() > 1 {
        datasets.push(summarize(COMBINED, results, options, max_entropy, &mut notes)?);
    }

    let subgroups = subgroup_report(results, &options.thresholds)?;
    notes.extend(subgroups.notes.iter().cloned());
    let curve = coverage_curve(results, &options.curve_thresholds)?;
    let mut sankey = BTreeMap::new();
    for &t in &options.thresholds {
        sankey.insert(threshold_label(t), sankey_export(results, t)?);
    }

    Ok(EvaluationReport {
        config: serde_json::Value::Null,
        n_questions: results.len(),
        max_k,
        graders: BTreeMap::new(),
        datasets,
        subgroups,
        curve,
        sankey,
        cost: None,
        notes,
    })
}

/// Shortest decimal form of a threshold: `0.3`, `1.2`.
pub fn threshold_label(t: f64) -> String {
    format!("{t}")
}

/// `< .001`, `.003`, `1.000`.
fn p_display(p: f64) -> String {
    if p < 0.001 {
        "< .001".to_string()
    } else if p >= 1.0 {
        "1.000".to_string()
    } else {
        format_rounded(p, 3).trim_start_matches('0').to_string()
    }
}

fn signed(v: f64) -> String {
    let s = format_rounded(v, 1);
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

impl EvaluationReport {
    /// Plain-text tables mirroring the machine-readable report.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "Selective accuracy by dataset (baseline → retained)").unwrap();
        for d in &self.datasets {
            writeln!(out, "\n{} (n={}, baseline {}%)", d.dataset, d.n, percent_display(d.baseline_correct, d.n)).unwrap();
            for t in &d.thresholds {
                let mut line = format!("  DSE <= {}: {}", threshold_label(t.threshold), t.summary);
                if let Some(b) = &t.bootstrap {
                    write!(
                        line,
                        "  CI{:.0} [{}, {}]  p {}{}",
                        100.0 * (1.0 - b.alpha),
                        signed(b.ci_low),
                        signed(b.ci_high),
                        p_display(b.p_value),
                        if b.significant_after_bonferroni { "  *" } else { "" }
                    )
                    .unwrap();
                }
                writeln!(out, "{line}").unwrap();
            }
        }
        if let Some(b) = self.datasets.iter().flat_map(|d| &d.thresholds).find_map(|t| t.bootstrap.as_ref()) {
            writeln!(
                out,
                "\n* significant at p < {}/{} ({} bootstrap iterations, seed {})",
                b.alpha, b.comparisons, b.iterations, b.seed
            )
            .unwrap();
        }

        writeln!(out, "\nSubgroups (n answered, accuracy %)").unwrap();
        for row in &self.subgroups.rows {
            let mut line = format!(
                "  {}/{}: all {} {}",
                row.dataset,
                row.subgroup,
                row.n,
                percent_display(row.baseline_correct, row.n)
            );
            for c in &row.cells {
                write!(
                    line,
                    " | <= {}: {} {}",
                    threshold_label(c.threshold),
                    c.n_answered,
                    percent_display(c.n_correct, c.n_answered)
                )
                .unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }

        if !self.graders.is_empty() {
            let list: Vec<String> = self.graders.iter().map(|(g, n)| format!("{g}: {n}")).collect();
            writeln!(out, "\nGrades by source: {} (automatic graders approximate expert review)", list.join(", ")).unwrap();
        }
        if let Some(c) = &self.cost {
            writeln!(
                out,
                "\nCost at ${}/M tokens: sampling ${:.2} + entailment ${:.2} = ${:.2}; est. latency {:.1} s{}",
                c.price_per_million_tokens,
                c.sampling_cost,
                c.entailment_cost,
                c.total_cost,
                c.pipeline_latency_ms / 1000.0,
                if c.complete { "" } else { " (incomplete token counts)" }
            )
            .unwrap();
        }
        for n in &self.notes {
            writeln!(out, "note: {n}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::fixtures;

    fn options(iterations: usize) -> ReportOptions {
        ReportOptions {
            thresholds: vec![1.2, 0.6, 0.3],
            curve_thresholds: vec![1.2, 0.6, 0.3, 0.0],
            bootstrap: BootstrapConfig { iterations, seed: 1, ..Default::default() },
        }
    }

    #[test]
    fn report_rows_and_text() {
        let results = fixtures::build(706, 365, 334, 255, 0.0, 1.0);
        let report = build_report(&results, &options(200)).unwrap();
        assert_eq!(report.datasets.len(), 1);
        let d = &report.datasets[0];
        assert!(d.thresholds[0].no_filtering);
        assert_eq!(d.thresholds[0].outcome.as_ref().unwrap().delta, 0.0);
        assert_eq!(d.thresholds[2].summary, "51.7 → 76.3 (Δ +24.6, n=334/706)");
        let text = report.render_text();
        assert!(text.contains("no filtering: 51.7 → 51.7 (Δ +0.0, n=706/706)"));
        assert!(text.contains("51.7 → 76.3 (Δ +24.6, n=334/706)"));
        assert_eq!(report.sankey.len(), 3);
    }

    #[test]
    fn combined_row_with_two_datasets() {
        let mut results = fixtures::build(10, 5, 5, 4, 0.0, 1.0);
        for r in results.iter_mut().take(4) {
            r.dataset = "other".into();
        }
        let report = build_report(&results, &options(50)).unwrap();
        let names: Vec<_> = report.datasets.iter().map(|d| d.dataset.as_str()).collect();
        assert_eq!(names, ["fixture", "other", COMBINED]);
    }

    #[test]
    fn empty_retained_rows_are_noted() {
        let results = fixtures::build(5, 2, 0, 0, 0.0, 1.0);
        let report = build_report(&results, &options(20)).unwrap();
        assert!(report.datasets[0].thresholds[2].outcome.is_none());
        assert!(report.notes.iter().any(|n| n.contains("empty retained set")));
        assert_eq!(build_report(&[], &options(1)), Err(EvalError::NoResults));
    }

    #[test]
    fn p_value_display() {
        assert_eq!(p_display(0.0001), "< .001");
        assert_eq!(p_display(0.003), ".003");
        assert_eq!(p_display(0.1), ".100");
        assert_eq!(p_display(1.0), "1.000");
    }
}
