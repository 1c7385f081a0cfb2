//! Paired bootstrap of the accuracy gain.
//!
//! Each iteration resamples question records with replacement and
//! recomputes both accuracies on the resample. Iteration `i` draws from its
//! own ChaCha8 stream (`seed`, stream `i`), so parallel and sequential runs
//! agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_threshold, selective_accuracy, EvalError, QuestionResult};

/// Generator identity recorded in every result.
pub const GENERATOR: &str = "chacha8/seed_from_u64/stream-per-iteration";

/// Redraws allowed per iteration when a resample retains nothing.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Pre-specified comparisons for the Bonferroni correction.
    pub comparisons: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            seed: 0,
            alpha: 0.05,
            comparisons: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
    pub generator: String,
    pub alpha: f64,
    pub comparisons: usize,
    /// Percentage points, from the original sample.
    pub delta_point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub significant_after_bonferroni: bool,
}

fn resample_delta(results: &[QuestionResult], threshold: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = results.len();
    let mut correct = 0usize;
    let mut retained = 0usize;
    let mut retained_correct = 0usize;
    for _ in 0..n {
        let r = &results[rng.gen_range(0..n)];
        correct += r.baseline_correct as usize;
        if r.retained_at(threshold) {
            retained += 1;
            retained_correct += r.baseline_correct as usize;
        }
    }
    (retained > 0).then(|| 100.0 * retained_correct as f64 / retained as f64 - 100.0 * correct as f64 / n as f64)
}

/// Resampled accuracy gains, in iteration order.
pub fn bootstrap_deltas(
    results: &[QuestionResult],
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    if iterations == 0 {
        return Err(EvalError::InvalidParameter("iterations must be at least 1".into()));
    }
    check_threshold(threshold)?;
    (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for _ in 0..MAX_REDRAWS {
                if let Some(d) = resample_delta(results, threshold, &mut rng) {
                    return Ok(d);
                }
            }
            Err(EvalError::ResampleExhausted {
                iteration: i,
                attempts: MAX_REDRAWS,
            })
        })
        .collect()
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Two-sided bootstrap test and percentile interval for the accuracy gain.
///
/// `p = 2 * min(P(d <= 0), P(d >= 0))` over the resampled gains, clipped to
/// `[1 / iterations, 1]`.
pub fn bootstrap_delta(
    results: &[QuestionResult],
    threshold: f64,
    config: &BootstrapConfig,
) -> Result<BootstrapResult, EvalError> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(EvalError::InvalidParameter(format!("alpha {} not in (0, 1)", config.alpha)));
    }
    if config.comparisons == 0 {
        return Err(EvalError::InvalidParameter("comparisons must be at least 1".into()));
    }
    let point = selective_accuracy(results, threshold)?;
    let mut deltas = bootstrap_deltas(results, threshold, config.iterations, config.seed)?;
    deltas.sort_by(f64::total_cmp);

    let b = deltas.len() as f64;
    let le = deltas.iter().filter(|&&d| d <= 0.0).count() as f64 / b;
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count() as f64 / b;
    let p_value = (2.0 * le.min(ge)).clamp(1.0 / b, 1.0);

    Ok(BootstrapResult {
        threshold,
        iterations: config.iterations,
        seed: config.seed,
        generator: GENERATOR.to_string(),
        alpha: config.alpha,
        comparisons: config.comparisons,
        delta_point: point.delta,
        ci_low: percentile(&deltas, config.alpha / 2.0),
        ci_high: percentile(&deltas, 1.0 - config.alpha / 2.0),
        p_value,
        significant_after_bonferroni: bonferroni_significant(p_value, config.alpha, config.comparisons),
    })
}

/// `p < alpha / comparisons`.
pub fn bonferroni_significant(p: f64, alpha: f64, comparisons: usize) -> bool {
    assert!(comparisons >= 1, "at least one comparison");
    p < alpha / comparisons as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::fixtures;

    #[test]
    fn degenerate_all_correct() {
        let results = fixtures::build(20, 20, 20, 20, 0.0, 0.0);
        let config = BootstrapConfig { iterations: 2_000, ..Default::default() };
        let r = bootstrap_delta(&results, 0.3, &config).unwrap();
        assert_eq!((r.ci_low, r.ci_high, r.p_value), (0.0, 0.0, 1.0));
        assert!(!r.significant_after_bonferroni);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let results = fixtures::build(50, 25, 20, 15, 0.1, 0.9);
        let config = BootstrapConfig { iterations: 3_000, seed: 42, ..Default::default() };
        let a = bootstrap_delta(&results, 0.3, &config).unwrap();
        let b = bootstrap_delta(&results, 0.3, &config).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.delta_point && a.delta_point <= a.ci_high);
        assert_ne!(
            bootstrap_deltas(&results, 0.3, 200, 42).unwrap(),
            bootstrap_deltas(&results, 0.3, 200, 43).unwrap()
        );
    }

    #[test]
    fn parallel_matches_sequential() {
        let results = fixtures::build(30, 12, 10, 8, 0.0, 1.0);
        let par = bootstrap_deltas(&results, 0.5, 500, 7).unwrap();
        let seq: Vec<f64> = (0..500)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                rng.set_stream(i as u64);
                loop {
                    if let Some(d) = resample_delta(&results, 0.5, &mut rng) {
                        return d;
                    }
                }
            })
            .collect();
        assert_eq!(par, seq);
    }

    #[test]
    fn parameter_validation() {
        let results = fixtures::build(4, 2, 2, 1, 0.0, 1.0);
        let bad_alpha = BootstrapConfig { alpha: 1.0, iterations: 10, ..Default::default() };
        assert!(bootstrap_delta(&results, 0.3, &bad_alpha).is_err());
        assert!(bootstrap_deltas(&results, 0.3, 0, 1).is_err());
        assert!(bootstrap_deltas(&[], 0.3, 10, 1).is_err());
    }

    #[test]
    fn bonferroni_examples() {
        assert!(bonferroni_significant(0.003, 0.05, 12));
        assert!(!bonferroni_significant(0.100, 0.05, 12));
        assert!(!bonferroni_significant(0.05, 0.05, 1));
        assert!((0.05f64 / 12.0 - 0.0042).abs() < 5e-5);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 10.0, 20.0, 30.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 1.0), 30.0);
        assert!((percentile(&v, 0.5) - 15.0).abs() < 1e-12);
        assert_eq!(percentile(&[5.0; 10], 0.025), 5.0);
    }
}
