//! Semantic clustering of sampled answers from pairwise entailment verdicts.
//!
//! Every ordered pair `(i, j)`, `i != j`, is judged once. Two answers are
//! linked when each entails the other; clusters are then assembled from the
//! resulting undirected graph under a recorded [`ClusterPolicy`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{self, EntropyValue};
use crate::gateway::{CallUsage, GatewayError};
use crate::pool::bounded_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Entails,
    DoesNotEntail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub premise_index: usize,
    pub hypothesis_index: usize,
    pub label: Label,
    pub raw_judge_output: String,
    /// Set when the reply never parsed and the conservative label was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<CallUsage>,
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no samples to cluster")]
    NoSamples,
    #[error("missing verdicts for pairs {0:?}")]
    MissingVerdicts(Vec<(usize, usize)>),
    #[error("invalid verdict ({premise}, {hypothesis}) for k = {k}")]
    InvalidVerdict { premise: usize, hypothesis: usize, k: usize },
    #[error("entailment judging failed for pairs {failed:?}: {message}")]
    JudgingFailed {
        failed: Vec<(usize, usize)>,
        /// Verdicts that did complete, for resumption.
        partial: Box<EntailmentMatrix>,
        message: String,
    },
}

/// Ordered-pair verdicts for one question's `k` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRecord", into = "MatrixRecord")]
pub struct EntailmentMatrix {
    k: usize,
    verdicts: BTreeMap<(usize, usize), EntailmentVerdict>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    k: usize,
    verdicts: Vec<EntailmentVerdict>,
}

impl From<EntailmentMatrix> for MatrixRecord {
    fn from(m: EntailmentMatrix) -> Self {
        MatrixRecord {
            k: m.k,
            verdicts: m.verdicts.into_values().collect(),
        }
    }
}

impl TryFrom<MatrixRecord> for EntailmentMatrix {
    type Error = ClusterError;

    fn try_from(r: MatrixRecord) -> Result<Self, Self::Error> {
        let mut m = EntailmentMatrix::new(r.k);
        for v in r.verdicts {
            m.insert(v)?;
        }
        Ok(m)
    }
}

impl EntailmentMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            verdicts: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn insert(&mut self, verdict: EntailmentVerdict) -> Result<(), ClusterError> {
        let (i, j) = (verdict.premise_index, verdict.hypothesis_index);
        if i == j || i >= self.k || j >= self.k {
            return Err(ClusterError::InvalidVerdict {
                premise: i,
                hypothesis: j,
                k: self.k,
            });
        }
        self.verdicts.insert((i, j), verdict);
        Ok(())
    }

    /// Convenience for tests and fixtures: record a bare label.
    pub fn set(&mut self, premise: usize, hypothesis: usize, label: Label) -> Result<(), ClusterError> {
        self.insert(EntailmentVerdict {
            premise_index: premise,
            hypothesis_index: hypothesis,
            label,
            raw_judge_output: String::new(),
            fallback: false,
            usage: None,
        })
    }

    pub fn get(&self, premise: usize, hypothesis: usize) -> Option<&EntailmentVerdict> {
        self.verdicts.get(&(premise, hypothesis))
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.verdicts.len() == self.k * self.k.saturating_sub(1)
    }

    pub fn missing_pairs(&self) -> Vec<(usize, usize)> {
        required_checks(self.k)
            .into_iter()
            .filter(|p| !self.verdicts.contains_key(p))
            .collect()
    }

    /// Verdicts in lexicographic pair order.
    pub fn verdicts(&self) -> impl Iterator<Item = &EntailmentVerdict> {
        self.verdicts.values()
    }
}

/// All ordered pairs `(i, j)` with `i != j`, lexicographically.
pub fn required_checks(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Undirected graph whose edges are confirmed mutual entailments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutualGraph {
    k: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl MutualGraph {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            edges: BTreeSet::new(),
        }
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        assert!(a < self.k && b < self.k && a != b, "edge ({a}, {b}) out of range");
        self.edges.insert((a.min(b), a.max(b)));
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Edges as `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }
}

pub fn mutual_entailment_graph(matrix: &EntailmentMatrix) -> Result<MutualGraph, ClusterError> {
    let missing = matrix.missing_pairs();
    if !missing.is_empty() {
        return Err(ClusterError::MissingVerdicts(missing));
    }
    let entails = |i, j| matrix.get(i, j).is_some_and(|v| v.label == Label::Entails);
    let mut graph = MutualGraph::new(matrix.k);
    for i in 0..matrix.k {
        for j in (i + 1)..matrix.k {
            if entails(i, j) && entails(j, i) {
                graph.add_edge(i, j);
            }
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterPolicy {
    /// Clusters are the connected components of the mutual-entailment graph.
    #[default]
    ConnectedComponents,
    /// Each sample joins the first cluster whose lowest-index member it
    /// mutually entails, else opens a new cluster.
    GreedyRepresentative,
}

impl std::fmt::Display for ClusterPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterPolicy::ConnectedComponents => "connected-components",
            ClusterPolicy::GreedyRepresentative => "greedy-representative",
        })
    }
}

impl std::str::FromStr for ClusterPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "connected-components" => Ok(ClusterPolicy::ConnectedComponents),
            "greedy-representative" => Ok(ClusterPolicy::GreedyRepresentative),
            other => Err(format!("unknown clustering policy `{other}`")),
        }
    }
}

/// Partition of sample indices `0..k`. Members are ascending; clusters are
/// ordered by their lowest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClustering {
    pub k: usize,
    pub clusters: Vec<Vec<usize>>,
    pub policy: ClusterPolicy,
}

impl SemanticClustering {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn entropy(&self) -> Result<EntropyValue, entropy::EntropyError> {
        entropy::entropy_of_sizes(&self.sizes())
    }

    /// Cluster id per sample index.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.k];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

pub fn assemble_clusters(graph: &MutualGraph, policy: ClusterPolicy) -> SemanticClustering {
    let k = graph.k;
    let clusters = match policy {
        ClusterPolicy::ConnectedComponents => {
            let mut dsu = DisjointSet::new(k);
            for (a, b) in graph.edges() {
                dsu.union(a, b);
            }
            let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..k {
                let root = dsu.find(i);
                by_root.entry(root).or_default().push(i);
            }
            let mut clusters: Vec<Vec<usize>> = by_root.into_values().collect();
            clusters.sort_by_key(|c| c[0]);
            clusters
        }
        ClusterPolicy::GreedyRepresentative => {
            let mut clusters: Vec<Vec<usize>> = Vec::new();
            for i in 0..k {
                match clusters.iter_mut().find(|c| graph.has_edge(c[0], i)) {
                    Some(c) => c.push(i),
                    None => clusters.push(vec![i]),
                }
            }
            clusters
        }
    };
    SemanticClustering { k, clusters, policy }
}

/// One judge invocation: does `premise` entail `hypothesis`?
#[derive(Debug, Clone, Copy)]
pub struct JudgeCall<'a> {
    pub context: &'a str,
    pub premise: &'a str,
    pub hypothesis: &'a str,
    pub premise_index: usize,
    pub hypothesis_index: usize,
    /// Position of the pair in [`required_checks`] order.
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub label: Label,
    pub raw: String,
    pub fallback: bool,
    pub usage: Option<CallUsage>,
}

impl JudgeOutcome {
    pub fn plain(label: Label) -> Self {
        Self {
            label,
            raw: match label {
                Label::Entails => "ENTAILMENT".into(),
                Label::DoesNotEntail => "NOT_ENTAILMENT".into(),
            },
            fallback: false,
            usage: None,
        }
    }
}

pub trait EntailmentJudge: Sync {
    fn judge(&self, call: &JudgeCall<'_>) -> Result<JudgeOutcome, GatewayError>;
}

impl<F> EntailmentJudge for F
where
    F: Fn(&JudgeCall<'_>) -> Result<JudgeOutcome, GatewayError> + Sync,
{
    fn judge(&self, call: &JudgeCall<'_>) -> Result<JudgeOutcome, GatewayError> {
        self(call)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClusterOptions {
    pub max_in_flight: usize,
    /// Previously obtained verdicts; their pairs are not judged again.
    pub resume: Option<EntailmentMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub clustering: SemanticClustering,
    pub matrix: EntailmentMatrix,
}

/// Judges every ordered pair of `samples` and clusters the result.
pub fn cluster_answers<J: EntailmentJudge + ?Sized>(
    samples: &[String],
    judge: &J,
    context: &str,
    policy: ClusterPolicy,
    options: &ClusterOptions,
) -> Result<ClusterOutcome, ClusterError> {
    let k = samples.len();
    if k == 0 {
        return Err(ClusterError::NoSamples);
    }
    let mut matrix = match &options.resume {
        Some(m) if m.k == k => m.clone(),
        _ => EntailmentMatrix::new(k),
    };
    let pairs: Vec<(usize, (usize, usize))> = required_checks(k)
        .into_iter()
        .enumerate()
        .filter(|(_, p)| !matrix.verdicts.contains_key(p))
        .collect();

    let results = bounded_map(&pairs, options.max_in_flight.max(1), |_, &(ordinal, (i, j))| {
        judge.judge(&JudgeCall {
            context,
            premise: &samples[i],
            hypothesis: &samples[j],
            premise_index: i,
            hypothesis_index: j,
            ordinal,
        })
    });

    let mut failed = Vec::new();
    let mut message = String::new();
    for ((_, (i, j)), r) in pairs.iter().zip(results) {
        match r {
            Ok(o) => matrix.insert(EntailmentVerdict {
                premise_index: *i,
                hypothesis_index: *j,
                label: o.label,
                raw_judge_output: o.raw,
                fallback: o.fallback,
                usage: o.usage,
            })?,
            Err(e) => {
                failed.push((*i, *j));
                message = e.to_string();
            }
        }
    }
    if !failed.is_empty() {
        return Err(ClusterError::JudgingFailed {
            failed,
            partial: Box::new(matrix),
            message,
        });
    }
    let graph = mutual_entailment_graph(&matrix)?;
    Ok(ClusterOutcome {
        clustering: assemble_clusters(&graph, policy),
        matrix,
    })
}

/// Per-question audit record: the samples, every verdict and the partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAudit {
    pub question_id: String,
    pub question: String,
    pub samples: Vec<String>,
    pub policy: ClusterPolicy,
    pub judge_temperature: f64,
    pub judge_sees_image: bool,
    pub matrix: EntailmentMatrix,
    pub clusters: Vec<Vec<usize>>,
    pub cluster_sizes: Vec<usize>,
    pub dse: f64,
    pub max_entropy: f64,
}
