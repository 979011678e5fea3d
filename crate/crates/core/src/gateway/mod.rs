//! Report generation, report classification and embedding backends.

mod mock;
mod retry;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, SampleKind};
use crate::par;
use crate::prompt::{Phase, PromptKind, RenderedPrompt};

pub use mock::{KeywordClassifier, MockEmbedder, MockGenerator, REAL_VULN_MARKER};
pub use retry::RetryPolicy;
pub use wire::{parse_verdict, ChatClient, WireClassifier, WireEmbedder, WireGenerator, CLASSIFY_INSTRUCTION};

/// Reports longer than this many words are flagged.
pub const WORD_LIMIT: usize = 500;

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("backend {name} unavailable: {message}")]
    BackendUnavailable { name: String, message: String },
    #[error("backend {name} rejected the request with status {status}: {message}")]
    BackendRejected { name: String, status: u16, message: String },
    #[error("backend {0} returned an empty completion")]
    EmptyCompletion(String),
    #[error("backend {name} sent a reply that is not valid: {message}")]
    MalformedReply { name: String, message: String },
    #[error("classifier reply has no single POSITIVE/NEGATIVE verdict on its first line: {0:?}")]
    UnparseableVerdict(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("backend spec field `{0}` is invalid")]
    InvalidSpec(&'static str),
    #[error("prompt was not rendered from sample {0}")]
    PromptMismatch(String),
    #[error("report {0} has no text to classify")]
    EmptyReport(String),
}

impl GatewayError {
    /// Whether another attempt might succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::BackendUnavailable { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub name: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    /// Name of the environment variable holding the bearer token. Empty means
    /// no Authorization header.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout() -> u64 {
    120
}

impl BackendSpec {
    /// A spec with defaults for everything but the name, as used by mocks.
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint: String::new(),
            model_id: String::new(),
            api_key_env: String::new(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.name.trim().is_empty() {
            return Err(GatewayError::InvalidSpec("name"));
        }
        if self.timeout_secs == 0 {
            return Err(GatewayError::InvalidSpec("timeout_secs"));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidSpec("temperature"));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidSpec("max_output_tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_kind(kind: SampleKind) -> Self {
        match kind {
            SampleKind::Vulnerable => Label::Positive,
            SampleKind::Fixed => Label::Negative,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub sample_id: String,
    pub backend_name: String,
    pub prompt_kind: PromptKind,
    pub phase: Phase,
    pub text: String,
    pub word_count: usize,
    pub over_limit: bool,
    pub label: Label,
}

pub fn report_id(sample_id: &str, backend: &str, kind: PromptKind, phase: Phase) -> String {
    let phase = match phase {
        Phase::Training => "train",
        Phase::Evaluation => "eval",
    };
    format!("{sample_id}:{backend}:{}:{phase}", kind.code())
}

/// Whitespace-separated token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub sample_id: String,
    pub report_id: String,
    pub predicted: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub backend_name: String,
}

pub trait GeneratorBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Produces the report text for one prompt. Wire backends only see the
    /// prompt; the sample is available for simulation.
    fn generate(&self, prompt: &RenderedPrompt, sample: &Sample) -> Result<String, GatewayError>;
}

pub trait ClassifierBackend: Send + Sync {
    fn name(&self) -> &str;
    /// A verdict on a report text, with an optional confidence in `[0, 1]`.
    fn judge(&self, report_text: &str) -> Result<(Label, Option<f64>), GatewayError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// One report to generate.
#[derive(Debug, Clone)]
pub struct ReportJob {
    pub sample: Sample,
    pub phase: Phase,
    pub prompt: RenderedPrompt,
}

pub fn generate_report(
    backend: &dyn GeneratorBackend,
    prompt: &RenderedPrompt,
    sample: &Sample,
    phase: Phase,
    retry: &RetryPolicy,
) -> Result<Report, GatewayError> {
    if prompt.attached_code != sample.text().replace("\r\n", "\n") {
        return Err(GatewayError::PromptMismatch(sample.sample_id.clone()));
    }
    let text = retry.run(|_| backend.generate(prompt, sample))?;
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyCompletion(backend.name().to_string()));
    }
    Ok(finish_report(backend.name(), prompt.kind, phase, sample, text))
}

/// Builds a report around an already generated text. The label follows the
/// sample kind alone.
pub fn finish_report(backend: &str, kind: PromptKind, phase: Phase, sample: &Sample, text: String) -> Report {
    let word_count = word_count(&text);
    Report {
        report_id: report_id(&sample.sample_id, backend, kind, phase),
        sample_id: sample.sample_id.clone(),
        backend_name: backend.to_string(),
        prompt_kind: kind,
        phase,
        over_limit: word_count > WORD_LIMIT,
        word_count,
        label: Label::from_kind(sample.kind),
        text,
    }
}

/// Generates every job with at most `max_in_flight` requests outstanding.
/// Results come back in job order; failures sit next to successes.
pub fn generate_all(
    backend: &dyn GeneratorBackend,
    jobs: &[ReportJob],
    max_in_flight: usize,
    retry: &RetryPolicy,
) -> Vec<Result<Report, GatewayError>> {
    par::bounded(jobs, max_in_flight, |_, j| generate_report(backend, &j.prompt, &j.sample, j.phase, retry))
}

pub fn classify_report(backend: &dyn ClassifierBackend, report: &Report, retry: &RetryPolicy) -> Result<Classification, GatewayError> {
    if report.text.trim().is_empty() {
        return Err(GatewayError::EmptyReport(report.report_id.clone()));
    }
    let (predicted, score) = retry.run(|_| backend.judge(&report.text))?;
    let score = score.map(|s| s.clamp(0.0, 1.0));
    Ok(Classification {
        sample_id: report.sample_id.clone(),
        report_id: report.report_id.clone(),
        predicted,
        score,
        backend_name: backend.name().to_string(),
    })
}

pub fn classify_all(
    backend: &dyn ClassifierBackend,
    reports: &[Report],
    max_in_flight: usize,
    retry: &RetryPolicy,
) -> Vec<Result<Classification, GatewayError>> {
    par::bounded(reports, max_in_flight, |_, r| classify_report(backend, r, retry))
}
