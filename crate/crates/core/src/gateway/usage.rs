//! Token, cost and latency accounting.

use serde::{Deserialize, Serialize};

use super::AnswerSample;
use crate::clustering::EntailmentVerdict;

/// Tokens and wall time of one backend call (or of a retried call, summed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallUsage {
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
    pub latency_ms: u64,
}

impl CallUsage {
    pub fn combine(&self, other: &CallUsage) -> CallUsage {
        let add = |a: Option<u64>, b: Option<u64>| match (a, b) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        CallUsage {
            tokens_in: add(self.tokens_in, other.tokens_in),
            tokens_out: add(self.tokens_out, other.tokens_out),
            estimated: self.estimated || other.estimated,
            latency_ms: self.latency_ms + other.latency_ms,
        }
    }

    fn tokens(&self) -> Option<u64> {
        Some(self.tokens_in? + self.tokens_out?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub price_per_million_tokens: f64,
    pub sampling_calls: usize,
    pub entailment_calls: usize,
    pub sampling_tokens: u64,
    pub entailment_tokens: u64,
    pub sampling_cost: f64,
    pub entailment_cost: f64,
    pub total_cost: f64,
    pub mean_call_latency_ms: f64,
    /// Sampling and judging each run fully parallel, so the pipeline costs
    /// about two sequential calls.
    pub pipeline_latency_ms: f64,
    /// Records whose token counts were missing and were costed as zero.
    pub records_missing_tokens: usize,
    pub records_estimated_tokens: usize,
    pub complete: bool,
}

/// Prices a set of sampled answers and entailment verdicts.
///
/// Records without token counts contribute zero and mark the estimate
/// incomplete.
pub fn account_usage(
    samples: &[AnswerSample],
    verdicts: &[EntailmentVerdict],
    price_per_million_tokens: f64,
) -> CostEstimate {
    let sample_usage: Vec<CallUsage> = samples.iter().map(AnswerSample::usage).collect();
    // verdicts resolved without a call (empty answers) carry no usage
    let verdict_usage: Vec<CallUsage> = verdicts.iter().filter_map(|v| v.usage).collect();

    let mut missing = 0;
    let mut estimated = 0;
    let mut sum = |usages: &[CallUsage]| -> u64 {
        usages
            .iter()
            .map(|u| {
                if u.estimated {
                    estimated += 1;
                }
                u.tokens().unwrap_or_else(|| {
                    missing += 1;
                    0
                })
            })
            .sum()
    };
    let sampling_tokens = sum(&sample_usage);
    let entailment_tokens = sum(&verdict_usage);

    if missing > 0 {
        log::warn!("{missing} records lack token counts; costed as zero");
    }

    let calls = sample_usage.len() + verdict_usage.len();
    let latency_total: u64 = sample_usage
        .iter()
        .chain(verdict_usage.iter())
        .map(|u| u.latency_ms)
        .sum();
    let mean_call_latency_ms = if calls == 0 {
        0.0
    } else {
        latency_total as f64 / calls as f64
    };

    let cost = |tokens: u64| tokens as f64 * price_per_million_tokens / 1e6;
    let sampling_cost = cost(sampling_tokens);
    let entailment_cost = cost(entailment_tokens);
    CostEstimate {
        price_per_million_tokens,
        sampling_calls: sample_usage.len(),
        entailment_calls: verdict_usage.len(),
        sampling_tokens,
        entailment_tokens,
        sampling_cost,
        entailment_cost,
        total_cost: sampling_cost + entailment_cost,
        mean_call_latency_ms,
        pipeline_latency_ms: 2.0 * mean_call_latency_ms,
        records_missing_tokens: missing,
        records_estimated_tokens: estimated,
        complete: missing == 0,
    }
}
