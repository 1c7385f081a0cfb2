//! Cluster distributions, discrete semantic entropy and threshold gating.
//!
//! Entropy is measured in base 10 (dits). With `k` sampled answers the value
//! lies in `[0, log10(k)]`: zero when every answer lands in one semantic
//! cluster, `log10(k)` when every answer is its own cluster.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for invariant checks on probabilities and bounds.
pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("no clusters")]
    NoClusters,
    #[error("invalid cluster size {size} at position {index}")]
    InvalidClusterSize { index: usize, size: usize },
    #[error("invalid sample count: {0}")]
    InvalidSampleCount(usize),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(f64),
}

/// Relative frequency of each semantic cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    counts: Vec<usize>,
    total: usize,
    probabilities: Vec<f64>,
}

impl ClusterDistribution {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Builds the cluster distribution `|C_i| / Σ|C_j|`, preserving input order.
pub fn cluster_distribution(cluster_sizes: &[usize]) -> Result<ClusterDistribution, EntropyError> {
    if cluster_sizes.is_empty() {
        return Err(EntropyError::NoClusters);
    }
    if let Some((index, &size)) = cluster_sizes.iter().enumerate().find(|(_, &s)| s == 0) {
        return Err(EntropyError::InvalidClusterSize { index, size });
    }
    let total: usize = cluster_sizes.iter().sum();
    let probabilities = cluster_sizes
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    Ok(ClusterDistribution {
        counts: cluster_sizes.to_vec(),
        total,
        probabilities,
    })
}

/// Entropy of one question's answer distribution, in dits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    pub value: f64,
    pub sample_count: usize,
}

/// `-Σ p_i log10 p_i` over the cluster probabilities.
///
/// Each term is evaluated as `(c/n) * (log10 n - log10 c)` so that a single
/// cluster gives exactly zero and `n` singletons give exactly `log10 n`.
pub fn discrete_semantic_entropy(dist: &ClusterDistribution) -> EntropyValue {
    let n = dist.total as f64;
    let log_n = n.log10();
    let value: f64 = dist
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let c = c as f64;
            (c / n) * (log_n - c.log10())
        })
        .sum();
    EntropyValue {
        // tiny negative values cannot arise from the term form, but clamp for the invariant
        value: value.max(0.0),
        sample_count: dist.total,
    }
}

/// Convenience wrapper: sizes straight to entropy.
pub fn entropy_of_sizes(cluster_sizes: &[usize]) -> Result<EntropyValue, EntropyError> {
    cluster_distribution(cluster_sizes).map(|d| discrete_semantic_entropy(&d))
}

/// Largest attainable entropy with `k` samples: `log10(k)`.
pub fn max_entropy(k: usize) -> Result<f64, EntropyError> {
    if k == 0 {
        return Err(EntropyError::InvalidSampleCount(k));
    }
    Ok((k as f64).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub entropy: EntropyValue,
    pub threshold: f64,
    pub accepted: bool,
}

/// Accepts a question when its entropy is at or below `threshold`.
pub fn gate(entropy: EntropyValue, threshold: f64) -> Result<GateDecision, EntropyError> {
    validate_threshold(threshold)?;
    Ok(GateDecision {
        entropy,
        threshold,
        accepted: entropy.value <= threshold,
    })
}

pub(crate) fn validate_threshold(threshold: f64) -> Result<(), EntropyError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(EntropyError::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Formats `value` with `decimals` places, ties to even on the exact binary value.
pub fn format_rounded(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    // avoid "-0.0"
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}
