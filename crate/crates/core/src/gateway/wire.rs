//! HTTP clients for OpenAI-style chat-completion and embedding endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{ClassifierBackend, EmbeddingBackend, GatewayError, GeneratorBackend, Label};
use crate::corpus::Sample;
use crate::prompt::RenderedPrompt;

/// Instruction sent ahead of every report a wire classifier judges.
pub const CLASSIFY_INSTRUCTION: &str = include_str!("../../templates/classify.txt");

const REPORT_SEPARATOR: &str = "--- REPORT ---";

pub struct ChatClient {
    name: String,
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    /// Reads the bearer token from `spec.api_key_env` when one is named.
    pub fn from_spec(spec: &super::BackendSpec) -> Result<Self, GatewayError> {
        spec.validate()?;
        if spec.endpoint.is_empty() {
            return Err(GatewayError::InvalidSpec("endpoint"));
        }
        let api_key = if spec.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&spec.api_key_env).map_err(|_| GatewayError::MissingApiKey(spec.api_key_env.clone()))?)
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable { name: spec.name.clone(), message: e.to_string() })?;
        Ok(Self {
            name: spec.name.clone(),
            endpoint: spec.endpoint.clone(),
            model: if spec.model_id.is_empty() { spec.name.clone() } else { spec.model_id.clone() },
            temperature: spec.temperature,
            max_tokens: spec.max_output_tokens,
            api_key,
            http,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn post(&self, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let unavailable = |message: String| GatewayError::BackendUnavailable { name: self.name.clone(), message };
        let resp = req.send().map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| unavailable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(unavailable(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(GatewayError::BackendRejected { name: self.name.clone(), status: status.as_u16(), message: text });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedReply { name: self.name.clone(), message: e.to_string() })
    }

    /// One user message in, the first choice's content out.
    pub fn chat(&self, content: &str) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let reply = self.post(&body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::MalformedReply { name: self.name.clone(), message: "no choices[0].message.content".into() })?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion(self.name.clone()));
        }
        Ok(text.to_string())
    }

    /// `{model, input}` in, `data[0].embedding` out.
    pub fn embedding(&self, input: &str) -> Result<Vec<f64>, GatewayError> {
        let reply = self.post(&json!({"model": self.model, "input": input}))?;
        reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| GatewayError::MalformedReply { name: self.name.clone(), message: "no data[0].embedding".into() })
    }
}

pub struct WireGenerator(pub ChatClient);

impl GeneratorBackend for WireGenerator {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn generate(&self, prompt: &RenderedPrompt, _sample: &Sample) -> Result<String, GatewayError> {
        self.0.chat(&prompt.message())
    }
}

pub struct WireClassifier(pub ChatClient);

impl ClassifierBackend for WireClassifier {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn judge(&self, report_text: &str) -> Result<(Label, Option<f64>), GatewayError> {
        let msg = format!("{CLASSIFY_INSTRUCTION}{REPORT_SEPARATOR}\n{report_text}");
        let reply = self.0.chat(&msg)?;
        Ok((parse_verdict(&reply)?, None))
    }
}

pub struct WireEmbedder(pub ChatClient);

impl EmbeddingBackend for WireEmbedder {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.0.embedding(text)
    }
}

/// The first line must name exactly one of POSITIVE or NEGATIVE as a whole
/// word, in any case.
pub fn parse_verdict(reply: &str) -> Result<Label, GatewayError> {
    let first = reply.trim_start().lines().next().unwrap_or("");
    let mut found = None;
    for word in first.split(|c: char| !c.is_alphanumeric()) {
        let label = match word.to_ascii_lowercase().as_str() {
            "positive" => Label::Positive,
            "negative" => Label::Negative,
            _ => continue,
        };
        match found {
            Some(l) if l != label => return Err(GatewayError::UnparseableVerdict(reply.to_string())),
            _ => found = Some(label),
        }
    }
    found.ok_or_else(|| GatewayError::UnparseableVerdict(reply.to_string()))
}
