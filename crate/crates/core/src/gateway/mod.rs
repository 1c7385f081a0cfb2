//! Uniform access to a black-box chat model for answer sampling and
//! entailment judging.
//!
//! Every backend speaks the same shape: it receives a [`BackendRequest`]
//! (a chat-completions payload plus routing metadata) and returns the
//! verbatim response body. Live HTTP, scripted mock and record/replay cache
//! backends all implement [`Backend`], so they compose freely.

mod cache;
mod http;
mod mock;
mod prompts;
mod usage;

pub use cache::{with_cache, CacheEntry, CacheKey, CachedBackend, CachedResponse};
pub use http::HttpBackend;
pub use mock::{FailureRule, GradeRule, JudgeRule, MockBackend, MockScript, MockTokens, ScriptedAnswers};
pub use prompts::{parse_equivalence_label, parse_entailment_label, PromptTemplates};
pub use usage::{account_usage, CallUsage, CostEstimate};

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{EntailmentJudge, JudgeCall, JudgeOutcome, Label};
use crate::corpus::ImageQuestion;
use crate::pool::bounded_map;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("cannot load image `{path}`: {message}")]
    Image { path: String, message: String },
    #[error("cache store error: {0}")]
    Cache(String),
    #[error("sampling incomplete for `{question_id}`: missing ordinals {missing:?}")]
    SamplingIncomplete {
        question_id: String,
        missing: Vec<usize>,
        completed: Vec<AnswerSample>,
        last_error: String,
    },
    #[error("judging failed: {0}")]
    JudgingFailed(String),
}

impl GatewayError {
    /// Transport-level failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Exponential backoff with optional full jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub initial_ms: u64,
    pub multiplier: f64,
    pub max_ms: u64,
    pub jitter: bool,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial_ms: 500,
            multiplier: 2.0,
            max_ms: 30_000,
            jitter: true,
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Self {
            initial_ms: 0,
            multiplier: 1.0,
            max_ms: 0,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let base = (self.initial_ms as f64 * self.multiplier.powi(retry as i32)).min(self.max_ms as f64);
        let ms = if self.jitter && base >= 1.0 {
            rand::thread_rng().gen_range(0.0..=base)
        } else {
            base
        };
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retry_limit: u32,
    pub backoff: Backoff,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_limit: 4,
            backoff: Backoff::default(),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retry_limit: u32) -> Self {
        Self {
            retry_limit,
            backoff: Backoff::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub retry_backoff: Backoff,
    pub request_timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4o-2024-05-13".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            max_in_flight: 16,
            retry_limit: 4,
            retry_backoff: Backoff::default(),
            request_timeout_ms: 120_000,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::Config("request timeout must be positive".into()));
        }
        if self.endpoint_url.trim().is_empty() {
            return Err(GatewayError::Config("endpoint URL is empty".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retry_limit: self.retry_limit,
            backoff: self.retry_backoff.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleRole {
    Sample,
    Baseline,
}

/// What a request is for. Used by scripted backends and diagnostics; it is
/// neither sent over the wire nor part of the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RequestPurpose {
    Answer {
        question_id: String,
        role: SampleRole,
        ordinal: usize,
    },
    Judge {
        question_id: String,
        premise: String,
        hypothesis: String,
    },
    Grade {
        question_id: String,
        answer: String,
        reference: String,
    },
}

impl RequestPurpose {
    pub fn question_id(&self) -> &str {
        match self {
            RequestPurpose::Answer { question_id, .. }
            | RequestPurpose::Judge { question_id, .. }
            | RequestPurpose::Grade { question_id, .. } => question_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Distinguishes repeated draws of the same logical request.
    pub nonce: String,
    pub purpose: RequestPurpose,
}

impl BackendRequest {
    /// JSON body sent to a chat-completions endpoint.
    pub fn wire_payload(&self) -> Value {
        json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
        })
    }

    /// Request as stored in the cache and hashed into its key: the wire
    /// payload with inline images replaced by their SHA-256, plus the nonce.
    pub fn canonical(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<Value> = m
                    .content
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text { text } => json!({"type": "text", "text": text}),
                        ContentPart::ImageUrl { image_url } => {
                            let digest = hex::encode(Sha256::digest(image_url.url.as_bytes()));
                            json!({"type": "image_url", "image_url": {"sha256": digest}})
                        }
                    })
                    .collect();
                json!({"role": m.role, "content": parts})
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "nonce": self.nonce,
        })
    }

    /// Concatenated text parts, for token estimation.
    pub fn text_len(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| m.content.iter())
            .map(|p| match p {
                ContentPart::Text { text } => text.chars().count(),
                ContentPart::ImageUrl { .. } => 0,
            })
            .sum()
    }
}

/// Verbatim body returned by a backend plus the observed latency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub body: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError>;

    /// Stable identity recorded on every sample.
    fn fingerprint(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        (**self).complete(request)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        (**self).complete(request)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        (**self).complete(request)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

/// Characters per token used when the provider reports no usage.
pub const CHARS_PER_TOKEN_ESTIMATE: usize = 4;

/// Assistant text and token usage extracted from a chat-completions body.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: CallUsage,
}

pub fn parse_completion(
    request: &BackendRequest,
    response: &BackendResponse,
) -> Result<Completion, GatewayError> {
    let body: Value = serde_json::from_str(&response.body)
        .map_err(|e| GatewayError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let content = &body["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => {
            return Err(GatewayError::MalformedResponse(format!(
                "unexpected message content: {other}"
            )))
        }
    };
    if body["choices"][0].is_null() {
        return Err(GatewayError::MalformedResponse("no choices in response".into()));
    }
    let prompt = body["usage"]["prompt_tokens"].as_u64();
    let completion = body["usage"]["completion_tokens"].as_u64();
    let usage = match (prompt, completion) {
        (Some(tokens_in), Some(tokens_out)) => CallUsage {
            tokens_in: Some(tokens_in),
            tokens_out: Some(tokens_out),
            estimated: false,
            latency_ms: response.latency_ms,
        },
        _ => CallUsage {
            tokens_in: Some(request.text_len().div_ceil(CHARS_PER_TOKEN_ESTIMATE) as u64),
            tokens_out: Some(text.chars().count().div_ceil(CHARS_PER_TOKEN_ESTIMATE) as u64),
            estimated: true,
            latency_ms: response.latency_ms,
        },
    };
    Ok(Completion { text, usage })
}

/// Issues `request`, retrying retryable failures per `policy`.
pub fn call_with_retry<B: Backend + ?Sized>(
    backend: &B,
    request: &BackendRequest,
    policy: &RetryPolicy,
) -> Result<BackendResponse, GatewayError> {
    let mut retry = 0;
    loop {
        match backend.complete(request) {
            Ok(r) => return Ok(r),
            Err(e) if e.is_retryable() && retry < policy.retry_limit => {
                log::warn!("retrying {} after error: {e}", request.purpose.question_id());
                std::thread::sleep(policy.backoff.delay(retry));
                retry += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// One sampled model answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub question_id: String,
    pub role: SampleRole,
    pub ordinal: usize,
    pub text: String,
    pub temperature: f64,
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tokens_estimated: bool,
    pub latency_ms: u64,
    pub backend_fingerprint: String,
}

impl AnswerSample {
    pub fn usage(&self) -> CallUsage {
        CallUsage {
            tokens_in: self.tokens_in,
            tokens_out: self.tokens_out,
            estimated: self.tokens_estimated,
            latency_ms: self.latency_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplingOptions {
    pub model: String,
    pub role: SampleRole,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub prompts: PromptTemplates,
}

/// Reads the item's image and renders it as a data URL.
pub fn image_data_url(image_ref: &str, base_dir: Option<&std::path::Path>) -> Result<String, GatewayError> {
    use base64::Engine;
    if image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    if let Some(b64) = image_ref.strip_prefix("base64:") {
        return Ok(format!("data:image/png;base64,{b64}"));
    }
    let path = match base_dir {
        Some(dir) if std::path::Path::new(image_ref).is_relative() => dir.join(image_ref),
        _ => std::path::PathBuf::from(image_ref),
    };
    let bytes = std::fs::read(&path).map_err(|e| GatewayError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let mime = match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        _ => "image/png",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

/// Draws `k` answers at `temperature`, skipping ordinals already present in
/// `existing`. Returned samples are sorted by ordinal.
pub fn sample_answers<B: Backend + ?Sized>(
    backend: &B,
    item: &ImageQuestion,
    image_url: &str,
    k: usize,
    temperature: f64,
    existing: &[AnswerSample],
    options: &SamplingOptions,
) -> Result<Vec<AnswerSample>, GatewayError> {
    if k == 0 {
        return Err(GatewayError::Config("k must be at least 1".into()));
    }
    let mut done: Vec<AnswerSample> = existing
        .iter()
        .filter(|s| s.ordinal < k && s.role == options.role && s.question_id == item.id)
        .cloned()
        .collect();
    done.sort_by_key(|s| s.ordinal);
    done.dedup_by_key(|s| s.ordinal);
    let todo: Vec<usize> = (0..k)
        .filter(|o| done.binary_search_by_key(o, |s| s.ordinal).is_err())
        .collect();

    let fingerprint = backend.fingerprint();
    let results = bounded_map(&todo, options.max_in_flight, |_, &ordinal| {
        let request = BackendRequest {
            model: options.model.clone(),
            messages: options.prompts.answer_messages(&item.question, image_url),
            temperature,
            nonce: format!("{}-{ordinal}", role_tag(options.role)),
            purpose: RequestPurpose::Answer {
                question_id: item.id.clone(),
                role: options.role,
                ordinal,
            },
        };
        let response = call_with_retry(backend, &request, &options.retry)?;
        let completion = parse_completion(&request, &response)?;
        Ok::<_, GatewayError>(AnswerSample {
            question_id: item.id.clone(),
            role: options.role,
            ordinal,
            text: completion.text,
            temperature,
            tokens_in: completion.usage.tokens_in,
            tokens_out: completion.usage.tokens_out,
            tokens_estimated: completion.usage.estimated,
            latency_ms: completion.usage.latency_ms,
            backend_fingerprint: fingerprint.clone(),
        })
    });

    let mut missing = Vec::new();
    let mut last_error = None;
    for (ordinal, r) in todo.iter().zip(results) {
        match r {
            Ok(s) => done.push(s),
            Err(e) => {
                missing.push(*ordinal);
                last_error = Some(e.to_string());
            }
        }
    }
    done.sort_by_key(|s| s.ordinal);
    if !missing.is_empty() {
        return Err(GatewayError::SamplingIncomplete {
            question_id: item.id.clone(),
            missing,
            completed: done,
            last_error: last_error.unwrap_or_default(),
        });
    }
    Ok(done)
}

fn role_tag(role: SampleRole) -> &'static str {
    match role {
        SampleRole::Sample => "sample",
        SampleRole::Baseline => "baseline",
    }
}

/// Lowest temperature supported by chat-completions endpoints.
pub const JUDGE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone)]
pub struct JudgeOptions {
    pub model: String,
    pub retry: RetryPolicy,
    /// Extra attempts when the reply is not one of the closed-set labels.
    pub unparseable_retries: u32,
    pub prompts: PromptTemplates,
    /// Data URL attached to judge prompts; `None` judges text only.
    pub image_url: Option<String>,
}

/// Asks the backend whether `premise` entails `hypothesis` given the question.
///
/// Unparseable replies are re-asked with a fresh nonce up to
/// `unparseable_retries` times, then recorded as does-not-entail with the
/// fallback flag set.
pub fn judge_entailment<B: Backend + ?Sized>(
    backend: &B,
    question_id: &str,
    context: &str,
    premise: &str,
    hypothesis: &str,
    ordinal: usize,
    options: &JudgeOptions,
) -> Result<JudgeOutcome, GatewayError> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        // no call: an empty answer entails only another empty answer
        let both = premise.trim().is_empty() && hypothesis.trim().is_empty();
        return Ok(JudgeOutcome {
            label: if both { Label::Entails } else { Label::DoesNotEntail },
            raw: "<empty answer>".to_string(),
            fallback: false,
            usage: None,
        });
    }
    let mut usage_total: Option<CallUsage> = None;
    let mut raw = String::new();
    for attempt in 0..=options.unparseable_retries {
        let request = BackendRequest {
            model: options.model.clone(),
            messages: options
                .prompts
                .judge_messages(context, premise, hypothesis, options.image_url.as_deref()),
            temperature: JUDGE_TEMPERATURE,
            nonce: format!("judge-{ordinal}-{attempt}"),
            purpose: RequestPurpose::Judge {
                question_id: question_id.to_string(),
                premise: premise.to_string(),
                hypothesis: hypothesis.to_string(),
            },
        };
        let response = call_with_retry(backend, &request, &options.retry)
            .map_err(|e| GatewayError::JudgingFailed(e.to_string()))?;
        let completion = parse_completion(&request, &response)
            .map_err(|e| GatewayError::JudgingFailed(e.to_string()))?;
        usage_total = Some(match usage_total {
            None => completion.usage,
            Some(u) => u.combine(&completion.usage),
        });
        raw = completion.text;
        if let Some(label) = parse_entailment_label(&raw) {
            return Ok(JudgeOutcome {
                label,
                raw,
                fallback: false,
                usage: usage_total,
            });
        }
    }
    log::warn!("unparseable judge reply for {question_id} pair {ordinal}: {raw:?}; recording does-not-entail");
    Ok(JudgeOutcome {
        label: Label::DoesNotEntail,
        raw,
        fallback: true,
        usage: usage_total,
    })
}

/// Adapts a [`Backend`] into an [`EntailmentJudge`] for one question.
pub struct BackendJudge<'a, B: Backend + ?Sized> {
    pub backend: &'a B,
    pub question_id: &'a str,
    pub options: &'a JudgeOptions,
}

impl<B: Backend + ?Sized> EntailmentJudge for BackendJudge<'_, B> {
    fn judge(&self, call: &JudgeCall<'_>) -> Result<JudgeOutcome, GatewayError> {
        judge_entailment(
            self.backend,
            self.question_id,
            call.context,
            call.premise,
            call.hypothesis,
            call.ordinal,
            self.options,
        )
    }
}

impl<B: Backend + ?Sized> fmt::Debug for BackendJudge<'_, B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendJudge")
            .field("backend", &self.backend.fingerprint())
            .field("question_id", &self.question_id)
            .finish()
    }
}
