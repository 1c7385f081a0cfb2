//! Scripted offline backend.
//!
//! Answers come from per-question scripts keyed by role and ordinal; judge
//! and grading requests are decided by rules. Replies are rendered as
//! chat-completions bodies, so the mock exercises the same parsing path as
//! the live backend.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Backend, BackendRequest, BackendResponse, GatewayError, RequestPurpose, SampleRole};
use crate::corpus::normalize_answer;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedAnswers {
    /// Answer per sample ordinal; ordinals past the end wrap around.
    pub samples: Vec<String>,
    pub baseline: Option<String>,
}

/// How judge requests are decided.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JudgeRule {
    /// Entails iff the normalized texts are equal.
    #[default]
    Equality,
    /// Entails iff both texts fall in the same class; unlisted texts form
    /// their own class by normalized equality.
    Classes { classes: Vec<Vec<String>> },
    /// Independent pseudo-random verdict per ordered pair of texts.
    Random { seed: u64, p_entail: f64 },
    /// Always replies with `reply`, verbatim.
    Fixed { reply: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradeRule {
    #[default]
    Equality,
    Containment,
}

/// Requests matching every present field fail with a transport error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureRule {
    pub question_id: Option<String>,
    pub role: Option<SampleRole>,
    /// Empty matches every ordinal.
    pub ordinals: Vec<usize>,
    pub judge: bool,
}

/// Fixed usage reported per call kind; absent means estimate from text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTokens {
    pub answer_in: u64,
    pub answer_out: u64,
    pub judge_in: u64,
    pub judge_out: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub answers: BTreeMap<String, ScriptedAnswers>,
    /// Used for questions without a script.
    pub default_answer: Option<String>,
    pub judge: JudgeRule,
    pub grade: GradeRule,
    pub failures: Vec<FailureRule>,
    /// Every request fails, as if the endpoint were down.
    pub unreachable: bool,
    /// Latency reported on every reply.
    pub latency_ms: u64,
    /// Real time spent inside each call, for concurrency tests.
    pub delay_ms: u64,
    pub tokens: Option<MockTokens>,
}

impl MockScript {
    pub fn with_samples(mut self, question_id: &str, texts: &[&str]) -> Self {
        self.answers.entry(question_id.to_string()).or_default().samples =
            texts.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_baseline(mut self, question_id: &str, text: &str) -> Self {
        self.answers.entry(question_id.to_string()).or_default().baseline = Some(text.to_string());
        self
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    fingerprint: String,
    calls: AtomicUsize,
    judge_calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let canonical = serde_json::to_string(&script).expect("script serializes");
        let digest = hex::encode(Sha256::digest(canonical.as_bytes()));
        Self {
            script,
            fingerprint: format!("mock:{}", &digest[..16]),
            ..Default::default()
        }
    }

    /// Total `complete` invocations, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn judge_calls(&self) -> usize {
        self.judge_calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn fails(&self, purpose: &RequestPurpose) -> bool {
        if self.script.unreachable {
            return true;
        }
        self.script.failures.iter().any(|rule| {
            if let Some(q) = &rule.question_id {
                if q != purpose.question_id() {
                    return false;
                }
            }
            match purpose {
                RequestPurpose::Answer { role, ordinal, .. } => {
                    !rule.judge
                        && rule.role.is_none_or(|r| r == *role)
                        && (rule.ordinals.is_empty() || rule.ordinals.contains(ordinal))
                }
                RequestPurpose::Judge { .. } => rule.judge,
                RequestPurpose::Grade { .. } => false,
            }
        })
    }

    fn answer_text(&self, question_id: &str, role: SampleRole, ordinal: usize) -> Result<String, GatewayError> {
        let scripted = self.script.answers.get(question_id);
        let text = match (role, scripted) {
            (SampleRole::Baseline, Some(s)) => s
                .baseline
                .clone()
                .or_else(|| s.samples.first().cloned()),
            (SampleRole::Sample, Some(s)) if !s.samples.is_empty() => {
                Some(s.samples[ordinal % s.samples.len()].clone())
            }
            _ => None,
        };
        text.or_else(|| self.script.default_answer.clone())
            .ok_or_else(|| GatewayError::Transport(format!("mock has no script for question `{question_id}`")))
    }

    fn judge_reply(&self, premise: &str, hypothesis: &str) -> String {
        let entails = match &self.script.judge {
            JudgeRule::Fixed { reply } => return reply.clone(),
            JudgeRule::Equality => normalize_answer(premise) == normalize_answer(hypothesis),
            JudgeRule::Classes { classes } => {
                let class_of = |t: &str| {
                    let n = normalize_answer(t);
                    classes
                        .iter()
                        .position(|c| c.iter().any(|m| normalize_answer(m) == n))
                        .map(|i| i.to_string())
                        .unwrap_or(format!("self:{n}"))
                };
                class_of(premise) == class_of(hypothesis)
            }
            JudgeRule::Random { seed, p_entail } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(premise.as_bytes());
                h.update([0u8]);
                h.update(hypothesis.as_bytes());
                let d = h.finalize();
                let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
                x < *p_entail
            }
        };
        if entails { "ENTAILMENT" } else { "NOT_ENTAILMENT" }.to_string()
    }

    fn grade_reply(&self, answer: &str, reference: &str) -> String {
        let a = normalize_answer(answer);
        let r = normalize_answer(reference);
        let ok = match self.script.grade {
            GradeRule::Equality => a == r,
            GradeRule::Containment => crate::corpus::contains_phrase(&a, &r),
        };
        if ok { "EQUIVALENT" } else { "NOT_EQUIVALENT" }.to_string()
    }

    fn respond(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        if self.fails(&request.purpose) {
            return Err(GatewayError::Transport("mock endpoint unreachable".into()));
        }
        let (text, is_judge) = match &request.purpose {
            RequestPurpose::Answer { question_id, role, ordinal } => {
                (self.answer_text(question_id, *role, *ordinal)?, false)
            }
            RequestPurpose::Judge { premise, hypothesis, .. } => (self.judge_reply(premise, hypothesis), true),
            RequestPurpose::Grade { answer, reference, .. } => (self.grade_reply(answer, reference), true),
        };
        let (tokens_in, tokens_out) = match self.script.tokens {
            Some(t) if is_judge => (t.judge_in, t.judge_out),
            Some(t) => (t.answer_in, t.answer_out),
            None => (
                request.text_len().div_ceil(super::CHARS_PER_TOKEN_ESTIMATE) as u64,
                text.chars().count().div_ceil(super::CHARS_PER_TOKEN_ESTIMATE) as u64,
            ),
        };
        let body = json!({
            "id": "mock-completion",
            "object": "chat.completion",
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
            "usage": {
                "prompt_tokens": tokens_in,
                "completion_tokens": tokens_out,
                "total_tokens": tokens_in + tokens_out,
            },
        });
        Ok(BackendResponse {
            body: body.to_string(),
            latency_ms: self.script.latency_ms,
        })
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if matches!(request.purpose, RequestPurpose::Judge { .. }) {
            self.judge_calls.fetch_add(1, Ordering::SeqCst);
        }
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        let out = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
