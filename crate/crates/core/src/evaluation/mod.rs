//! Selective-prediction accuracy, resampling statistics and report tables.
//!
//! All accuracies derive from the temperature-0.1 baseline grades. A
//! question is retained at threshold `t` when its entropy is `<= t`; the
//! accuracy gain is retained-set accuracy minus full-set accuracy.

mod bootstrap;
mod curves;
mod report;

pub use bootstrap::{bonferroni_significant, bootstrap_deltas, bootstrap_delta, percentile, BootstrapConfig, BootstrapResult, GENERATOR};
pub use curves::{
    coverage_curve, curve_csv, default_curve_thresholds, sankey_csv, sankey_export, subgroup_report, CurvePoint, Flow,
    FlowTarget, SubgroupCell, SubgroupReport, SubgroupRow,
};
pub use report::{build_report, DatasetSummary, EvaluationReport, ReportOptions, ThresholdSummary, COMBINED};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no results")]
    NoResults,
    #[error("empty retained set at threshold {0}")]
    EmptyRetained(f64),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(f64),
    #[error("thresholds must be in descending order")]
    NotDescending,
    #[error("invalid bootstrap parameter: {0}")]
    InvalidParameter(String),
    #[error("resample {iteration} drew an empty retained set {attempts} times in a row")]
    ResampleExhausted { iteration: usize, attempts: usize },
    #[error("entropy {dse} of `{question_id}` is outside [0, log10({k})]")]
    InvalidEntropy { question_id: String, dse: f64, k: usize },
}

/// Per-question outcome feeding every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub dataset: String,
    pub subgroup: String,
    /// Grade of the low-temperature baseline answer.
    pub baseline_correct: bool,
    pub dse: f64,
    /// Samples the entropy was computed from.
    pub k: usize,
}

impl QuestionResult {
    pub fn retained_at(&self, threshold: f64) -> bool {
        self.dse <= threshold
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let max = if self.k == 0 { -1.0 } else { (self.k as f64).log10() };
        if !(self.dse >= 0.0 && self.dse <= max + crate::entropy::TOLERANCE) {
            return Err(EvalError::InvalidEntropy {
                question_id: self.question_id.clone(),
                dse: self.dse,
                k: self.k,
            });
        }
        Ok(())
    }
}

/// Accuracy before and after gating at one threshold. Percentages are raw
/// (unrounded); the count fields allow exact display rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub threshold: f64,
    pub n_total: usize,
    pub n_retained: usize,
    pub baseline_correct: usize,
    pub retained_correct: usize,
    pub baseline_accuracy: f64,
    pub filtered_accuracy: f64,
    /// Percentage points.
    pub delta: f64,
}

impl FilterOutcome {
    pub fn fraction_rejected(&self) -> f64 {
        1.0 - self.n_retained as f64 / self.n_total as f64
    }

    pub fn baseline_display(&self) -> String {
        percent_display(self.baseline_correct, self.n_total)
    }

    pub fn filtered_display(&self) -> String {
        percent_display(self.retained_correct, self.n_retained)
    }

    /// Signed gain in percentage points, one decimal.
    pub fn delta_display(&self) -> String {
        // (rc/nr - bc/nt) * 100 as one exact fraction
        let num = (self.retained_correct as i128 * self.n_total as i128
            - self.baseline_correct as i128 * self.n_retained as i128)
            * 100;
        let den = self.n_retained as i128 * self.n_total as i128;
        let s = round_fraction(num, den, 1);
        if s.starts_with('-') {
            s
        } else {
            format!("+{s}")
        }
    }

    /// `51.7 → 76.3 (Δ +24.6, n=334/706)`
    pub fn summary_line(&self) -> String {
        format!(
            "{} → {} (Δ {}, n={}/{})",
            self.baseline_display(),
            self.filtered_display(),
            self.delta_display(),
            self.n_retained,
            self.n_total
        )
    }
}

/// Exact `num/den` rounded half-to-even to `decimals` places.
pub fn round_fraction(num: i128, den: i128, decimals: u32) -> String {
    assert!(den != 0, "zero denominator");
    let negative = (num < 0) != (den < 0) && num != 0;
    let (num, den) = (num.abs(), den.abs());
    let scale = 10i128.pow(decimals);
    let scaled = num * scale;
    let mut q = scaled / den;
    let r = scaled % den;
    if 2 * r > den || (2 * r == den && q % 2 == 1) {
        q += 1;
    }
    let int = q / scale;
    let frac = q % scale;
    let body = if decimals == 0 {
        int.to_string()
    } else {
        format!("{int}.{frac:0width$}", width = decimals as usize)
    };
    if negative && q != 0 {
        format!("-{body}")
    } else {
        body
    }
}

/// `100 * correct / total` with one decimal, ties to even.
pub fn percent_display(correct: usize, total: usize) -> String {
    if total == 0 {
        return "n/a".to_string();
    }
    round_fraction(correct as i128 * 100, total as i128, 1)
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Counts `(n, correct)` over all results and over the retained subset.
pub(crate) fn tally(results: &[QuestionResult], threshold: f64) -> (usize, usize, usize, usize) {
    let mut n_retained = 0;
    let mut baseline_correct = 0;
    let mut retained_correct = 0;
    for r in results {
        if r.baseline_correct {
            baseline_correct += 1;
        }
        if r.retained_at(threshold) {
            n_retained += 1;
            if r.baseline_correct {
                retained_correct += 1;
            }
        }
    }
    (results.len(), baseline_correct, n_retained, retained_correct)
}

pub(crate) fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    crate::entropy::validate_threshold(threshold).map_err(|_| EvalError::InvalidThreshold(threshold))
}

pub fn selective_accuracy(results: &[QuestionResult], threshold: f64) -> Result<FilterOutcome, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    check_threshold(threshold)?;
    let (n_total, baseline_correct, n_retained, retained_correct) = tally(results, threshold);
    if n_retained == 0 {
        return Err(EvalError::EmptyRetained(threshold));
    }
    let baseline_accuracy = percent(baseline_correct, n_total);
    let filtered_accuracy = percent(retained_correct, n_retained);
    Ok(FilterOutcome {
        threshold,
        n_total,
        n_retained,
        baseline_correct,
        retained_correct,
        baseline_accuracy,
        filtered_accuracy,
        delta: filtered_accuracy - baseline_accuracy,
    })
}
