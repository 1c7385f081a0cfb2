//! Resumable, file-backed pipeline stages: sample, cluster, grade, report.
//!
//! Everything lives under the output directory:
//!
//! ```text
//! out/samples/<id>.json     sampled answers and the baseline answer
//! out/clusters/<id>.json    entailment matrix, partition and entropy
//! out/grades/<id>.json      grade of the baseline answer
//! out/reports/              summary.json, summary.txt, results.jsonl,
//!                           curve.csv, sankey_<t>.csv, cost.json
//! ```
//!
//! A stage skips every question whose output already exists, so re-running a
//! completed stage issues no backend calls.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_answers, ClusterAudit, ClusterError, ClusterOptions, ClusterPolicy, EntailmentMatrix};
use crate::corpus::{
    apply_overrides, grade, import_grades, load_corpus, Corpus, CorpusError, CorpusFormat, GradedAnswer, Grader,
    GraderKind, ImageQuestion, ModelJudgeGrader,
};
use crate::entropy::max_entropy;
use crate::evaluation::{
    build_report, coverage_curve, curve_csv, default_curve_thresholds, sankey_csv, BootstrapConfig, CurvePoint,
    EvalError, EvaluationReport, QuestionResult, ReportOptions,
};
use crate::gateway::{
    account_usage, image_data_url, sample_answers, with_cache, AnswerSample, Backend, BackendConfig, BackendJudge,
    BackendRequest, BackendResponse, CostEstimate, GatewayError, HttpBackend, JudgeOptions, MockBackend, MockScript,
    PromptTemplates, SampleRole, SamplingOptions, JUDGE_TEMPERATURE,
};
use crate::pool::bounded_map;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corpus {} contains no questions", .0.display())]
    EmptyCorpus(PathBuf),
    #[error("{what} missing for {}: {hint}", .ids.join(", "))]
    Incomplete { what: String, ids: Vec<String>, hint: String },
    #[error("backend failure for {}: {message}", .ids.join(", "))]
    BackendFailure { ids: Vec<String>, message: String },
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

impl PipelineError {
    /// 1 usage or input error, 2 incomplete pipeline data, 3 backend failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Corpus(_) => 1,
            PipelineError::Io { .. }
            | PipelineError::EmptyCorpus(_)
            | PipelineError::Incomplete { .. }
            | PipelineError::Evaluation(_) => 2,
            PipelineError::BackendFailure { .. } | PipelineError::Backend(_) => 3,
        }
    }
}

/// Resolved run configuration. Defaults follow the published protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Scripted offline backend; the HTTP backend is used when unset.
    pub mock_script: Option<PathBuf>,
    pub backend: BackendConfig,
    pub k: usize,
    pub sample_temperature: f64,
    pub baseline_temperature: f64,
    pub thresholds: Vec<f64>,
    /// Defaults to 0.1 steps from log10(k) down to 0.
    pub curve_thresholds: Option<Vec<f64>>,
    pub policy: ClusterPolicy,
    pub judge_sees_image: bool,
    pub unparseable_retries: u32,
    pub grader: GraderKind,
    /// Expert grades (`id,correct`) that replace automatic ones.
    pub grades_file: Option<PathBuf>,
    pub iterations: usize,
    pub seed: u64,
    pub alpha: f64,
    pub comparisons: usize,
    pub concurrency: usize,
    pub price_per_million_tokens: f64,
    pub prompts: PromptTemplates,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            corpus_format: CorpusFormat::Canonical,
            out_dir: PathBuf::from("out"),
            cache_dir: None,
            mock_script: None,
            backend: BackendConfig::default(),
            k: 15,
            sample_temperature: 1.0,
            baseline_temperature: 0.1,
            thresholds: vec![0.6, 0.3],
            curve_thresholds: None,
            policy: ClusterPolicy::ConnectedComponents,
            judge_sees_image: false,
            unparseable_retries: 2,
            grader: GraderKind::NormalizedExact,
            grades_file: None,
            iterations: 100_000,
            seed: 0,
            alpha: 0.05,
            comparisons: 12,
            concurrency: 16,
            price_per_million_tokens: 10.0,
            prompts: PromptTemplates::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.sample_temperature >= 0.0 && self.baseline_temperature >= 0.0) {
            return fail("temperatures must be non-negative");
        }
        if self.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return fail("thresholds must be non-negative");
        }
        if let Some(c) = &self.curve_thresholds {
            if c.is_empty() || c.windows(2).any(|w| !(w[0] > w[1])) || c.iter().any(|t| t.is_nan() || *t < 0.0) {
                return fail("curve thresholds must be non-negative and strictly descending");
            }
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0, 1)");
        }
        if self.comparisons == 0 {
            return fail("comparisons must be at least 1");
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1");
        }
        if !(self.price_per_million_tokens >= 0.0) {
            return fail("price must be non-negative");
        }
        if self.grader == GraderKind::Imported && self.grades_file.is_none() {
            return fail("the imported grader needs a grades file");
        }
        self.backend.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            thresholds: self.thresholds.clone(),
            curve_thresholds: self.curve_thresholds.clone().unwrap_or_else(|| default_curve_thresholds(self.k)),
            bootstrap: BootstrapConfig {
                iterations: self.iterations,
                seed: self.seed,
                alpha: self.alpha,
                comparisons: self.comparisons,
            },
        }
    }
}

/// Sampled answers for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub question_id: String,
    pub samples: Vec<AnswerSample>,
    pub baseline: Option<AnswerSample>,
}

impl SampleRecord {
    pub fn is_complete(&self, k: usize) -> bool {
        self.baseline.is_some() && self.samples.len() == k && self.samples.iter().enumerate().all(|(i, s)| s.ordinal == i)
    }

    pub fn texts(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.text.clone()).collect()
    }
}

/// Verdicts obtained before a judging failure, kept for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartialMatrix {
    question_id: String,
    samples: Vec<String>,
    matrix: EntailmentMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub questions: usize,
    pub computed: usize,
    pub skipped: usize,
    /// Requests that reached the backend (cache misses).
    pub backend_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub questions: usize,
    pub total: CostEstimate,
    pub mean_cost_per_question: f64,
    pub mean_sampling_cost_per_question: f64,
    pub mean_entailment_cost_per_question: f64,
}

/// Counts requests forwarded to the wrapped backend.
struct Metered<B> {
    inner: B,
    calls: Arc<AtomicUsize>,
}

impl<B: Backend> Backend for Metered<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

pub struct Pipeline {
    config: RunConfig,
    backend: OnceLock<Box<dyn Backend>>,
    supplied: std::sync::Mutex<Option<Box<dyn Backend>>>,
    calls: Arc<AtomicUsize>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

impl Pipeline {
    /// The backend (mock script or HTTP) is opened on first use.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config,
            backend: OnceLock::new(),
            supplied: std::sync::Mutex::new(None),
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Uses `backend` instead of the configured one. The cache, if
    /// configured, still sits in front of it.
    pub fn with_backend(config: RunConfig, backend: Box<dyn Backend>) -> Result<Self, PipelineError> {
        let p = Self::new(config)?;
        *p.supplied.lock().expect("backend lock") = Some(backend);
        Ok(p)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Requests that reached the underlying backend so far.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn backend(&self) -> Result<&dyn Backend, PipelineError> {
        if let Some(b) = self.backend.get() {
            return Ok(b.as_ref());
        }
        let inner: Box<dyn Backend> = match self.supplied.lock().expect("backend lock").take() {
            Some(b) => b,
            None => match &self.config.mock_script {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                    let script = MockScript::from_json(&text)
                        .map_err(|e| PipelineError::Config(format!("mock script {}: {e}", path.display())))?;
                    Box::new(MockBackend::new(script))
                }
                None => Box::new(HttpBackend::from_env(self.config.backend.clone())?),
            },
        };
        let metered = Metered {
            inner,
            calls: Arc::clone(&self.calls),
        };
        let backend: Box<dyn Backend> = match &self.config.cache_dir {
            Some(dir) => Box::new(with_cache(metered, dir)?),
            None => Box::new(metered),
        };
        let _ = self.backend.set(backend);
        Ok(self.backend.get().expect("backend initialized").as_ref())
    }

    pub fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let corpus = load_corpus(&self.config.corpus, self.config.corpus_format)?;
        if corpus.items.is_empty() {
            return Err(PipelineError::EmptyCorpus(self.config.corpus.clone()));
        }
        Ok(corpus)
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn record_path(&self, dir: &str, id: &str) -> PathBuf {
        self.dir(dir).join(format!("{}.json", file_stem(id)))
    }

    fn sampling_options(&self, role: SampleRole) -> SamplingOptions {
        SamplingOptions {
            model: self.config.backend.model_name.clone(),
            role,
            max_in_flight: self.config.concurrency,
            retry: self.config.backend.retry_policy(),
            prompts: self.config.prompts.clone(),
        }
    }

    /// Draws `k` samples and one baseline answer per question.
    pub fn sample(&self) -> Result<StageSummary, PipelineError> {
        let corpus = self.load_corpus()?;
        let calls_before = self.backend_calls();
        let k = self.config.k;
        let mut existing = BTreeMap::new();
        for item in &corpus.items {
            let path = self.record_path("samples", &item.id);
            if path.exists() {
                let record: SampleRecord = read_json(&path)?;
                existing.insert(item.id.clone(), record);
            }
        }
        let todo: Vec<&ImageQuestion> = corpus
            .items
            .iter()
            .filter(|i| !existing.get(&i.id).is_some_and(|r| r.is_complete(k)))
            .collect();
        let skipped = corpus.items.len() - todo.len();
        if !todo.is_empty() {
            self.backend()?;
        }
        let sample_opts = self.sampling_options(SampleRole::Sample);
        let baseline_opts = self.sampling_options(SampleRole::Baseline);

        let outcomes = bounded_map(&todo, self.config.concurrency, |_, item| {
            let prior = existing.get(&item.id);
            let mut record = SampleRecord {
                question_id: item.id.clone(),
                samples: prior.map(|r| r.samples.clone()).unwrap_or_default(),
                baseline: prior.and_then(|r| r.baseline.clone()),
            };
            let backend = self.backend()?;
            let image = image_data_url(&item.image, Some(&corpus.base_dir))?;
            let mut error = None;
            match sample_answers(backend, item, &image, k, self.config.sample_temperature, &record.samples, &sample_opts) {
                Ok(s) => record.samples = s,
                Err(GatewayError::SamplingIncomplete { completed, last_error, .. }) => {
                    record.samples = completed;
                    error = Some(last_error);
                }
                Err(e) => error = Some(e.to_string()),
            }
            if record.baseline.is_none() {
                let temp = self.config.baseline_temperature;
                match sample_answers(backend, item, &image, 1, temp, &[], &baseline_opts) {
                    Ok(mut b) => record.baseline = b.pop(),
                    Err(e) => error = Some(e.to_string()),
                }
            }
            write_json(&self.record_path("samples", &item.id), &record)?;
            Ok::<_, PipelineError>(error)
        });

        let mut failed = Vec::new();
        let mut message = String::new();
        for (item, outcome) in todo.iter().zip(outcomes) {
            match outcome {
                Ok(None) => {}
                Ok(Some(e)) => {
                    failed.push(item.id.clone());
                    message = e;
                }
                Err(e @ PipelineError::Io { .. }) => return Err(e),
                Err(e) => {
                    failed.push(item.id.clone());
                    message = e.to_string();
                }
            }
        }
        if !failed.is_empty() {
            return Err(PipelineError::BackendFailure { ids: failed, message });
        }
        Ok(self.summary("sample", corpus.items.len(), todo.len(), skipped, calls_before))
    }

    fn summary(&self, stage: &str, questions: usize, computed: usize, skipped: usize, calls_before: usize) -> StageSummary {
        let s = StageSummary {
            stage: stage.to_string(),
            questions,
            computed,
            skipped,
            backend_calls: self.backend_calls() - calls_before,
        };
        log::info!(
            "{stage}: {} questions, {} computed, {} already done, {} backend calls",
            s.questions,
            s.computed,
            s.skipped,
            s.backend_calls
        );
        s
    }

    fn load_samples(&self, corpus: &Corpus) -> Result<BTreeMap<String, SampleRecord>, PipelineError> {
        let mut records = BTreeMap::new();
        let mut missing = Vec::new();
        for item in &corpus.items {
            let path = self.record_path("samples", &item.id);
            if !path.exists() {
                missing.push(item.id.clone());
                continue;
            }
            let record: SampleRecord = read_json(&path)?;
            if record.is_complete(self.config.k) {
                records.insert(item.id.clone(), record);
            } else {
                missing.push(item.id.clone());
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::Incomplete {
                what: "complete samples".into(),
                ids: missing,
                hint: "run the sample stage first".into(),
            });
        }
        Ok(records)
    }

    /// Judges all ordered sample pairs and records the partition and entropy.
    pub fn cluster(&self) -> Result<StageSummary, PipelineError> {
        let corpus = self.load_corpus()?;
        let samples = self.load_samples(&corpus)?;
        let calls_before = self.backend_calls();

        let mut todo = Vec::new();
        for item in &corpus.items {
            let texts = samples[&item.id].texts();
            let path = self.record_path("clusters", &item.id);
            let mut resume = None;
            if path.exists() {
                let audit: ClusterAudit = read_json(&path)?;
                if audit.samples == texts && audit.policy == self.config.policy && audit.matrix.is_complete() {
                    continue;
                }
                if audit.samples == texts {
                    resume = Some(audit.matrix);
                }
            }
            let partial_path = self.partial_path(&item.id);
            if resume.is_none() && partial_path.exists() {
                let partial: PartialMatrix = read_json(&partial_path)?;
                if partial.samples == texts {
                    resume = Some(partial.matrix);
                }
            }
            todo.push((item, texts, resume));
        }
        let skipped = corpus.items.len() - todo.len();
        let needs_backend = todo.iter().any(|(_, _, r)| !r.as_ref().is_some_and(|m| m.is_complete()));
        if needs_backend {
            self.backend()?;
        }

        let outcomes = bounded_map(&todo, self.config.concurrency, |_, (item, texts, resume)| {
            let image_url = if self.config.judge_sees_image {
                Some(image_data_url(&item.image, Some(&corpus.base_dir))?)
            } else {
                None
            };
            let judge_opts = JudgeOptions {
                model: self.config.backend.model_name.clone(),
                retry: self.config.backend.retry_policy(),
                unparseable_retries: self.config.unparseable_retries,
                prompts: self.config.prompts.clone(),
                image_url,
            };
            let options = ClusterOptions {
                max_in_flight: self.config.concurrency,
                resume: resume.clone(),
            };
            let outcome = if resume.as_ref().is_some_and(|m| m.is_complete()) {
                let judge = |_: &crate::clustering::JudgeCall<'_>| -> Result<_, GatewayError> {
                    unreachable!("complete matrix needs no judging")
                };
                cluster_answers(texts, &judge, &item.question, self.config.policy, &options)
            } else {
                let judge = BackendJudge {
                    backend: self.backend()?,
                    question_id: &item.id,
                    options: &judge_opts,
                };
                cluster_answers(texts, &judge, &item.question, self.config.policy, &options)
            };
            match outcome {
                Ok(o) => {
                    let sizes = o.clustering.sizes();
                    let dse = o
                        .clustering
                        .entropy()
                        .map_err(|e| PipelineError::Config(e.to_string()))?
                        .value;
                    let audit = ClusterAudit {
                        question_id: item.id.clone(),
                        question: item.question.clone(),
                        samples: texts.clone(),
                        policy: self.config.policy,
                        judge_temperature: JUDGE_TEMPERATURE,
                        judge_sees_image: self.config.judge_sees_image,
                        matrix: o.matrix,
                        clusters: o.clustering.clusters,
                        cluster_sizes: sizes,
                        dse,
                        max_entropy: max_entropy(texts.len()).expect("k >= 1"),
                    };
                    write_json(&self.record_path("clusters", &item.id), &audit)?;
                    let partial = self.partial_path(&item.id);
                    if partial.exists() {
                        fs::remove_file(&partial).map_err(|e| io_err(&partial, e))?;
                    }
                    Ok(None)
                }
                Err(ClusterError::JudgingFailed { failed, partial, message }) => {
                    write_json(
                        &self.partial_path(&item.id),
                        &PartialMatrix {
                            question_id: item.id.clone(),
                            samples: texts.clone(),
                            matrix: *partial,
                        },
                    )?;
                    Ok(Some(format!("{} pairs failed: {message}", failed.len())))
                }
                Err(e) => Err(PipelineError::Config(e.to_string())),
            }
        });

        let mut failed = Vec::new();
        let mut message = String::new();
        for ((item, _, _), outcome) in todo.iter().zip(outcomes) {
            match outcome {
                Ok(None) => {}
                Ok(Some(m)) => {
                    failed.push(item.id.clone());
                    message = m;
                }
                Err(e @ (PipelineError::Backend(_) | PipelineError::BackendFailure { .. })) => {
                    failed.push(item.id.clone());
                    message = e.to_string();
                }
                Err(e) => return Err(e),
            }
        }
        if !failed.is_empty() {
            return Err(PipelineError::BackendFailure { ids: failed, message });
        }
        Ok(self.summary("cluster", corpus.items.len(), todo.len(), skipped, calls_before))
    }

    fn partial_path(&self, id: &str) -> PathBuf {
        self.dir("clusters").join(format!("{}.partial.json", file_stem(id)))
    }

    /// Grades each baseline answer against its reference, then applies any
    /// imported grades on top.
    pub fn grade(&self) -> Result<StageSummary, PipelineError> {
        let corpus = self.load_corpus()?;
        let samples = self.load_samples(&corpus)?;
        let calls_before = self.backend_calls();
        let overrides = match &self.config.grades_file {
            Some(path) => Some(import_grades(path, &corpus)?),
            None => None,
        };

        let automatic = self.config.grader != GraderKind::Imported;
        let mut todo = Vec::new();
        let mut grades = BTreeMap::new();
        for item in &corpus.items {
            let answer = &samples[&item.id].baseline.as_ref().expect("complete record").text;
            let path = self.record_path("grades", &item.id);
            if path.exists() {
                let g: GradedAnswer = read_json(&path)?;
                if &g.answer_text == answer && (g.grader == self.config.grader || g.grader == GraderKind::Imported) {
                    grades.insert(item.id.clone(), g);
                    continue;
                }
            }
            todo.push((item, answer.clone()));
        }
        let mut computed = 0;
        if automatic && !todo.is_empty() {
            let model_grader;
            let grader = match self.config.grader {
                GraderKind::NormalizedExact => Grader::NormalizedExact,
                GraderKind::Containment => Grader::Containment,
                _ => {
                    model_grader = ModelJudgeGrader {
                        backend: self.backend()?,
                        model: self.config.backend.model_name.clone(),
                        retry: self.config.backend.retry_policy(),
                        unparseable_retries: self.config.unparseable_retries,
                        prompts: self.config.prompts.clone(),
                    };
                    Grader::ModelJudge(model_grader)
                }
            };
            let results = bounded_map(&todo, self.config.concurrency, |_, (item, answer)| grade(item, answer, &grader));
            let mut failed = Vec::new();
            let mut message = String::new();
            for ((item, _), r) in todo.iter().zip(results) {
                match r {
                    Ok(g) => {
                        computed += 1;
                        grades.insert(item.id.clone(), g);
                    }
                    Err(e) => {
                        failed.push(item.id.clone());
                        message = e.to_string();
                    }
                }
            }
            self.write_grades(&grades)?;
            if !failed.is_empty() {
                return Err(PipelineError::BackendFailure { ids: failed, message });
            }
        }
        if let Some(o) = &overrides {
            for (item, answer) in &todo {
                grades.entry(item.id.clone()).or_insert_with(|| GradedAnswer {
                    question_id: item.id.clone(),
                    answer_text: answer.clone(),
                    correct: false,
                    grader: GraderKind::Imported,
                    evidence: String::new(),
                });
            }
            let known: BTreeMap<String, GradedAnswer> = grades
                .iter()
                .filter(|(id, _)| o.grades.contains_key(*id) || automatic)
                .map(|(id, g)| (id.clone(), g.clone()))
                .collect();
            grades = known;
            apply_overrides(&mut grades, o);
            if !automatic {
                computed = todo.iter().filter(|(i, _)| o.grades.contains_key(&i.id)).count();
            }
        }
        self.write_grades(&grades)?;
        Ok(self.summary("grade", corpus.items.len(), computed, corpus.items.len() - todo.len(), calls_before))
    }

    fn write_grades(&self, grades: &BTreeMap<String, GradedAnswer>) -> Result<(), PipelineError> {
        for (id, g) in grades {
            let path = self.record_path("grades", id);
            let fresh = !path.exists() || read_json::<GradedAnswer>(&path)? != *g;
            if fresh {
                write_json(&path, g)?;
            }
        }
        Ok(())
    }

    fn load_audits(&self, corpus: &Corpus) -> Result<BTreeMap<String, ClusterAudit>, PipelineError> {
        let mut audits = BTreeMap::new();
        let mut missing = Vec::new();
        for item in &corpus.items {
            let path = self.record_path("clusters", &item.id);
            if path.exists() {
                audits.insert(item.id.clone(), read_json(&path)?);
            } else {
                missing.push(item.id.clone());
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::Incomplete {
                what: "clusterings".into(),
                ids: missing,
                hint: "run the cluster stage first".into(),
            });
        }
        Ok(audits)
    }

    /// Joins audits and grades into per-question results.
    pub fn results(&self) -> Result<Vec<QuestionResult>, PipelineError> {
        let corpus = self.load_corpus()?;
        let audits = self.load_audits(&corpus)?;
        let grades = self.load_grades(&corpus)?;
        Ok(corpus
            .items
            .iter()
            .map(|item| {
                let audit = &audits[&item.id];
                QuestionResult {
                    question_id: item.id.clone(),
                    dataset: item.dataset.clone(),
                    subgroup: item.subgroup.clone(),
                    baseline_correct: grades[&item.id].correct,
                    dse: audit.dse,
                    k: audit.samples.len(),
                }
            })
            .collect())
    }

    fn load_grades(&self, corpus: &Corpus) -> Result<BTreeMap<String, GradedAnswer>, PipelineError> {
        let mut grades = BTreeMap::new();
        let mut missing = Vec::new();
        for item in &corpus.items {
            let path = self.record_path("grades", &item.id);
            if path.exists() {
                grades.insert(item.id.clone(), read_json(&path)?);
            } else {
                missing.push(item.id.clone());
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::Incomplete {
                what: "grades".into(),
                ids: missing,
                hint: "run the grade stage or import grades with a grades file".into(),
            });
        }
        Ok(grades)
    }

    /// Prices every recorded call.
    pub fn cost(&self) -> Result<CostReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let samples = self.load_samples(&corpus)?;
        let audits = self.load_audits(&corpus)?;
        let mut answers = Vec::new();
        for r in samples.values() {
            answers.extend(r.samples.iter().cloned());
            answers.extend(r.baseline.iter().cloned());
        }
        let verdicts: Vec<_> = audits.values().flat_map(|a| a.matrix.verdicts().cloned()).collect();
        let total = account_usage(&answers, &verdicts, self.config.price_per_million_tokens);
        let n = corpus.items.len() as f64;
        let report = CostReport {
            questions: corpus.items.len(),
            mean_cost_per_question: total.total_cost / n,
            mean_sampling_cost_per_question: total.sampling_cost / n,
            mean_entailment_cost_per_question: total.entailment_cost / n,
            total,
        };
        write_json(&self.dir("reports").join("cost.json"), &report)?;
        Ok(report)
    }

    /// Writes the coverage curve.
    pub fn curve(&self) -> Result<Vec<CurvePoint>, PipelineError> {
        let results = self.results()?;
        let points = coverage_curve(&results, &self.config.report_options().curve_thresholds)?;
        write_text(&self.dir("reports").join("curve.csv"), &curve_csv(&points))?;
        Ok(points)
    }

    /// Builds and writes every report file.
    pub fn report(&self) -> Result<EvaluationReport, PipelineError> {
        let results = self.results()?;
        let corpus = self.load_corpus()?;
        let grades = self.load_grades(&corpus)?;
        let cost = self.cost()?;

        let mut report = build_report(&results, &self.config.report_options())?;
        report.config = serde_json::to_value(&self.config).expect("config serializes");
        for g in grades.values() {
            *report.graders.entry(g.grader.to_string()).or_default() += 1;
        }
        report.cost = Some(cost.total.clone());

        let dir = self.dir("reports");
        write_json(&dir.join("summary.json"), &report)?;
        let mut text = report.render_text();
        text.push_str(&format!(
            "Mean cost per question: ${:.2} (sampling ${:.2}, entailment ${:.2})\n",
            cost.mean_cost_per_question, cost.mean_sampling_cost_per_question, cost.mean_entailment_cost_per_question
        ));
        write_text(&dir.join("summary.txt"), &text)?;
        let mut lines = String::new();
        for r in &results {
            lines.push_str(&serde_json::to_string(r).expect("result serializes"));
            lines.push('\n');
        }
        write_text(&dir.join("results.jsonl"), &lines)?;
        write_text(&dir.join("curve.csv"), &curve_csv(&report.curve))?;
        for (t, flows) in &report.sankey {
            write_text(&dir.join(format!("sankey_{t}.csv")), &sankey_csv(flows))?;
        }
        Ok(report)
    }
}

/// File name for a question id: safe characters kept, others `%XX`-escaped.
pub fn file_stem(id: &str) -> String {
    let mut out = String::new();
    for (i, b) in id.bytes().enumerate() {
        let safe = b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && i > 0);
        if safe {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("record serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Atomic write: temporary sibling, then rename.
fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_canonical;

    fn corpus_items() -> Vec<ImageQuestion> {
        ["a", "b/c"]
            .iter()
            .map(|id| ImageQuestion {
                id: id.to_string(),
                image: "base64:AAAA".into(),
                question: format!("question {id}"),
                reference: "CT".into(),
                dataset: "test".into(),
                subgroup: "modality".into(),
            })
            .collect()
    }

    fn setup(dir: &Path) -> RunConfig {
        write_canonical(dir.join("corpus.jsonl"), &corpus_items()).unwrap();
        RunConfig {
            corpus: dir.join("corpus.jsonl"),
            out_dir: dir.join("out"),
            k: 4,
            iterations: 200,
            concurrency: 2,
            thresholds: vec![0.3],
            ..Default::default()
        }
    }

    fn script() -> MockScript {
        MockScript::default()
            .with_samples("a", &["CT", "CT", "CT", "CT"])
            .with_baseline("a", "CT")
            .with_samples("b/c", &["CT", "MRI", "CT", "X-ray"])
            .with_baseline("b/c", "MRI")
    }

    #[test]
    fn file_stems_are_injective_and_safe() {
        assert_eq!(file_stem("q-1_2.x"), "q-1_2.x");
        assert_eq!(file_stem("b/c"), "b%2Fc");
        assert_eq!(file_stem(".."), "%2E.");
        assert_ne!(file_stem("a/b"), file_stem("a%2Fb"));
    }

    #[test]
    fn stages_run_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        let p = Pipeline::with_backend(config.clone(), Box::new(MockBackend::new(script()))).unwrap();
        let s = p.sample().unwrap();
        assert_eq!((s.computed, s.backend_calls), (2, 10));
        let c = p.cluster().unwrap();
        // "a": 12 judge calls; "b/c": 12
        assert_eq!(c.backend_calls, 24);
        p.grade().unwrap();
        let report = p.report().unwrap();
        assert_eq!(report.n_questions, 2);
        let results = p.results().unwrap();
        assert_eq!(results[0].dse, 0.0);
        assert!(results[0].baseline_correct && !results[1].baseline_correct);

        let again = p.sample().unwrap();
        assert_eq!((again.computed, again.backend_calls), (0, 0));
        assert_eq!(p.cluster().unwrap().backend_calls, 0);
        assert!(dir.path().join("out/clusters/b%2Fc.json").exists());
        assert!(dir.path().join("out/reports/sankey_0.3.csv").exists());
    }

    #[test]
    fn missing_stages_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        let p = Pipeline::with_backend(config, Box::new(MockBackend::new(script()))).unwrap();
        let err = p.cluster().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("a, b/c"));
        p.sample().unwrap();
        p.cluster().unwrap();
        let err = p.report().unwrap_err();
        assert!(err.to_string().contains("grade"), "{err}");
    }

    #[test]
    fn backend_failure_leaves_partial_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path());
        config.backend.retry_limit = 0;
        let unreachable = MockScript {
            unreachable: true,
            ..script()
        };
        let p = Pipeline::with_backend(config.clone(), Box::new(MockBackend::new(unreachable))).unwrap();
        let err = p.sample().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(!dir.path().join("out/reports").exists());

        let p = Pipeline::with_backend(config, Box::new(MockBackend::new(script()))).unwrap();
        assert_eq!(p.sample().unwrap().computed, 2);
    }

    #[test]
    fn imported_grades_override() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path());
        fs::write(dir.path().join("grades.csv"), "id,correct\nb/c,true\n").unwrap();
        config.grades_file = Some(dir.path().join("grades.csv"));
        let p = Pipeline::with_backend(config, Box::new(MockBackend::new(script()))).unwrap();
        p.sample().unwrap();
        p.grade().unwrap();
        let g: GradedAnswer = read_json(&dir.path().join("out/grades/b%2Fc.json")).unwrap();
        assert!(g.correct);
        assert_eq!(g.grader, GraderKind::Imported);
    }

    #[test]
    fn config_validation() {
        let bad = RunConfig { k: 0, ..Default::default() };
        assert_eq!(Pipeline::new(bad).unwrap_err().exit_code(), 1);
        let bad = RunConfig { curve_thresholds: Some(vec![0.3, 0.6]), ..Default::default() };
        assert!(bad.validate().is_err());
        let d = RunConfig::default();
        assert_eq!((d.k, d.thresholds.clone(), d.iterations, d.comparisons), (15, vec![0.6, 0.3], 100_000, 12));
        assert_eq!((d.sample_temperature, d.baseline_temperature, d.alpha), (1.0, 0.1, 0.05));
    }
}
