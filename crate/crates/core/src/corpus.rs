//! Benchmark ingestion and answer grading.
//!
//! The canonical corpus is line-delimited JSON, one [`ImageQuestion`] per
//! line. Adapters convert the VQA-Med 2019 test distribution and a CSV
//! layout for clinical radiology sets into that form.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    call_with_retry, parse_completion, parse_equivalence_label, Backend, BackendRequest, PromptTemplates,
    RequestPurpose, RetryPolicy,
};

pub const VQA_MED_2019: &str = "VQA-Med-2019";
pub const RAD_DATASET: &str = "RadDataset";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate question id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("unknown question ids in {path}: {ids:?}")]
    UnknownIds { path: String, ids: Vec<String> },
    #[error("grading failed for `{question_id}`: {message}")]
    GradingFailed { question_id: String, message: String },
    #[error("unknown corpus format `{0}`")]
    UnknownFormat(String),
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageQuestion {
    pub id: String,
    /// Path (relative to the corpus file) or inline `data:`/`base64:` image.
    pub image: String,
    pub question: String,
    pub reference: String,
    pub dataset: String,
    pub subgroup: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    #[default]
    Canonical,
    VqaMed2019,
    RadDataset,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(CorpusFormat::Canonical),
            "vqa-med-2019" => Ok(CorpusFormat::VqaMed2019),
            "rad-dataset" => Ok(CorpusFormat::RadDataset),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub items: Vec<ImageQuestion>,
    /// Directory that relative image paths are resolved against.
    pub base_dir: PathBuf,
    pub warnings: Vec<String>,
}

impl Corpus {
    /// Item counts keyed by `(dataset, subgroup)`.
    pub fn subgroup_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry((item.dataset.clone(), item.subgroup.clone())).or_insert(0) += 1;
        }
        counts
    }

    pub fn get(&self, id: &str) -> Option<&ImageQuestion> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let items = match format {
        CorpusFormat::Canonical => parse_canonical(path, &text)?,
        CorpusFormat::VqaMed2019 => parse_vqa_med_2019(path, &text)?,
        CorpusFormat::RadDataset => parse_rad_dataset(path, &text)?,
    };
    let mut warnings = Vec::new();
    if items.is_empty() {
        let w = format!("{} contains no items", path.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    let corpus = Corpus {
        items,
        base_dir,
        warnings,
    };
    for ((dataset, subgroup), n) in corpus.subgroup_counts() {
        log::info!("{dataset}/{subgroup}: {n} items");
    }
    Ok(corpus)
}

fn check_item(path: &Path, line: usize, item: &ImageQuestion, seen: &mut BTreeSet<String>) -> Result<(), CorpusError> {
    let malformed = |message: &str| CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    };
    if item.id.trim().is_empty() {
        return Err(malformed("empty id"));
    }
    if item.question.trim().is_empty() {
        return Err(malformed("empty question"));
    }
    if item.reference.trim().is_empty() {
        return Err(malformed("empty reference answer"));
    }
    if !seen.insert(item.id.clone()) {
        return Err(CorpusError::DuplicateId {
            path: path.display().to_string(),
            line,
            id: item.id.clone(),
        });
    }
    Ok(())
}

fn parse_canonical(path: &Path, text: &str) -> Result<Vec<ImageQuestion>, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: ImageQuestion = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        check_item(path, n + 1, &item, &mut seen)?;
        items.push(item);
    }
    Ok(items)
}

/// VQA-Med 2019 test layout: one `image_id|category|question|answer` line
/// per item, images at `VQAMed2019_Test_Images/<image_id>.jpg` next to the
/// file. Categories (`modality`, `plane`, `organ`, `abnormality`) become
/// subgroups; the image id becomes the question id.
fn parse_vqa_med_2019(path: &Path, text: &str) -> Result<Vec<ImageQuestion>, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 4 {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                line: n + 1,
                message: format!("expected 4 `|`-separated fields, found {}", fields.len()),
            });
        }
        let image_id = fields[0].trim();
        let item = ImageQuestion {
            id: image_id.to_string(),
            image: format!("VQAMed2019_Test_Images/{image_id}.jpg"),
            question: fields[2].trim().to_string(),
            reference: fields[3].trim().to_string(),
            dataset: VQA_MED_2019.to_string(),
            subgroup: fields[1].trim().to_ascii_lowercase(),
        };
        check_item(path, n + 1, &item, &mut seen)?;
        items.push(item);
    }
    Ok(items)
}

/// Maps a free-text modality to the radiology subgroup labels.
pub fn modality_subgroup(modality: &str) -> &'static str {
    let m = modality.trim().to_ascii_lowercase();
    match m.as_str() {
        "ct" | "computed tomography" | "cect" | "ncct" => "CT",
        "mr" | "mri" | "magnetic resonance" | "magnetic resonance imaging" => "MRI",
        "radiograph" | "radiography" | "x-ray" | "xray" | "cr" | "dx" | "conventional radiograph" => "radiography",
        "angiography" | "angiogram" | "dsa" | "xa" => "angiography",
        _ => "other",
    }
}

/// Clinical radiology CSV layout: header `id,image,modality,question,answer`.
fn parse_rad_dataset(path: &Path, text: &str) -> Result<Vec<ImageQuestion>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| CorpusError::Malformed {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let (c_id, c_image, c_mod, c_q, c_a) = (col("id")?, col("image")?, col("modality")?, col("question")?, col("answer")?);
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let item = ImageQuestion {
            id: field(c_id),
            image: field(c_image),
            question: field(c_q),
            reference: field(c_a),
            dataset: RAD_DATASET.to_string(),
            subgroup: modality_subgroup(&field(c_mod)).to_string(),
        };
        check_item(path, line, &item, &mut seen)?;
        items.push(item);
    }
    Ok(items)
}

/// Writes the canonical line-delimited form.
pub fn write_canonical(path: impl AsRef<Path>, items: &[ImageQuestion]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Case-fold, trim, collapse whitespace and strip terminal punctuation.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim()
        .to_string()
}

/// Whether `needle` occurs in `haystack` on word boundaries.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric();
    haystack.match_indices(needle).any(|(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraderKind {
    #[default]
    NormalizedExact,
    Containment,
    ModelJudge,
    Imported,
}

impl std::fmt::Display for GraderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraderKind::NormalizedExact => "normalized-exact",
            GraderKind::Containment => "containment",
            GraderKind::ModelJudge => "model-judge",
            GraderKind::Imported => "imported",
        })
    }
}

impl std::str::FromStr for GraderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized-exact" => Ok(GraderKind::NormalizedExact),
            "containment" => Ok(GraderKind::Containment),
            "model-judge" => Ok(GraderKind::ModelJudge),
            other => Err(format!("unknown grader `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradedAnswer {
    pub question_id: String,
    pub answer_text: String,
    pub correct: bool,
    pub grader: GraderKind,
    pub evidence: String,
}

pub struct ModelJudgeGrader<'a> {
    pub backend: &'a dyn Backend,
    pub model: String,
    pub retry: RetryPolicy,
    pub unparseable_retries: u32,
    pub prompts: PromptTemplates,
}

pub enum Grader<'a> {
    NormalizedExact,
    Containment,
    ModelJudge(ModelJudgeGrader<'a>),
}

impl Grader<'_> {
    pub fn kind(&self) -> GraderKind {
        match self {
            Grader::NormalizedExact => GraderKind::NormalizedExact,
            Grader::Containment => GraderKind::Containment,
            Grader::ModelJudge(_) => GraderKind::ModelJudge,
        }
    }
}

/// Grades `answer` against the item's reference.
pub fn grade(item: &ImageQuestion, answer: &str, grader: &Grader<'_>) -> Result<GradedAnswer, CorpusError> {
    let a = normalize_answer(answer);
    let r = normalize_answer(&item.reference);
    let (correct, evidence) = match grader {
        Grader::NormalizedExact => (a == r, format!("normalized answer {a:?} vs reference {r:?}")),
        Grader::Containment => (
            contains_phrase(&a, &r),
            format!("reference {r:?} within answer {a:?}"),
        ),
        Grader::ModelJudge(judge) => model_judge(item, answer, judge)?,
    };
    Ok(GradedAnswer {
        question_id: item.id.clone(),
        answer_text: answer.to_string(),
        correct,
        grader: grader.kind(),
        evidence,
    })
}

fn model_judge(item: &ImageQuestion, answer: &str, judge: &ModelJudgeGrader<'_>) -> Result<(bool, String), CorpusError> {
    let failed = |message: String| CorpusError::GradingFailed {
        question_id: item.id.clone(),
        message,
    };
    let mut last = String::new();
    for attempt in 0..=judge.unparseable_retries {
        let request = BackendRequest {
            model: judge.model.clone(),
            messages: judge.prompts.grade_messages(&item.question, answer, &item.reference),
            temperature: crate::gateway::JUDGE_TEMPERATURE,
            nonce: format!("grade-{attempt}"),
            purpose: RequestPurpose::Grade {
                question_id: item.id.clone(),
                answer: answer.to_string(),
                reference: item.reference.clone(),
            },
        };
        let response = call_with_retry(judge.backend, &request, &judge.retry).map_err(|e| failed(e.to_string()))?;
        let completion = parse_completion(&request, &response).map_err(|e| failed(e.to_string()))?;
        if let Some(ok) = parse_equivalence_label(&completion.text) {
            return Ok((ok, format!("judge reply {:?}", completion.text)));
        }
        last = completion.text;
    }
    Err(failed(format!("unparseable judge reply {last:?}")))
}

/// Grades read from a two-column override file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GradeOverrides {
    pub grades: BTreeMap<String, bool>,
    pub source: String,
}

/// Reads `id,correct` rows (comma or tab separated, optional header,
/// `true`/`false`) and checks every id against `corpus`.
pub fn import_grades(path: impl AsRef<Path>, corpus: &Corpus) -> Result<GradeOverrides, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let delimiter = if text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.contains('\t')) {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut grades = BTreeMap::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.display().to_string(),
            line,
            message,
        };
        if record.len() != 2 {
            return Err(malformed(format!("expected 2 columns, found {}", record.len())));
        }
        let (id, value) = (&record[0], &record[1]);
        let is_header = first && matches!(id.to_ascii_lowercase().as_str(), "id" | "question_id");
        first = false;
        if is_header {
            continue;
        }
        let correct = match value.to_ascii_lowercase().as_str() {
            "true" => true,
            "false" => false,
            other => return Err(malformed(format!("expected true/false, found `{other}`"))),
        };
        grades.insert(id.to_string(), correct);
    }
    let known = corpus.ids();
    let unknown: Vec<String> = grades.keys().filter(|id| !known.contains(id.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownIds {
            path: path.display().to_string(),
            ids: unknown,
        });
    }
    Ok(GradeOverrides {
        grades,
        source: path.display().to_string(),
    })
}

/// Replaces automatic grades with imported ones, recording provenance.
/// Questions without an automatic grade get one carrying an empty answer.
pub fn apply_overrides(grades: &mut BTreeMap<String, GradedAnswer>, overrides: &GradeOverrides) {
    for (id, &correct) in &overrides.grades {
        let answer_text = grades.get(id).map(|g| g.answer_text.clone()).unwrap_or_default();
        grades.insert(
            id.clone(),
            GradedAnswer {
                question_id: id.clone(),
                answer_text,
                correct,
                grader: GraderKind::Imported,
                evidence: format!("imported from {}", overrides.source),
            },
        );
    }
}
