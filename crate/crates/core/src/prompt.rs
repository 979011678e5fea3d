//! Prompt templates and context selection.
//!
//! Every template carries exactly one `{{CONTEXT}}` placeholder. The sample
//! code is never interpolated into a template; it follows the rendered
//! instructions after a fixed separator line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, SampleKind};

pub const CONTEXT_PLACEHOLDER: &str = "{{CONTEXT}}";
pub const CODE_SEPARATOR: &str = "--- CODE ---";

/// Generic context used for fixed training samples and every evaluation sample.
pub const GENERIC_CONTEXT: &str =
    "The Rust code is suspected to have a vulnerability, but no specific project details or past issues are known.";

/// The CO-STAR variant of [`GENERIC_CONTEXT`], which continues the same sentence.
pub const COSTAR_GENERIC_CONTEXT: &str = "The Rust code is suspected to have a vulnerability, but no specific project details or past issues are known. This absence of context necessitates a comprehensive and focused review to identify the most significant security concern, covering a wide range of common vulnerabilities in Rust.";

const BUILTIN_TO: &str = include_str!("../templates/to.txt");
const BUILTIN_RO: &str = include_str!("../templates/ro.txt");
const BUILTIN_COSTAR: &str = include_str!("../templates/costar.txt");

pub const COSTAR_MARKERS: [&str; 6] = ["#Context#", "#Objective#", "#Style#", "#Tone#", "#Audience#", "#Response#"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    #[serde(rename = "to")]
    TaskOriented,
    #[serde(rename = "ro")]
    RoleOriented,
    #[serde(rename = "costar")]
    CoStar,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [Self::TaskOriented, Self::RoleOriented, Self::CoStar];

    pub fn code(self) -> &'static str {
        match self {
            Self::TaskOriented => "to",
            Self::RoleOriented => "ro",
            Self::CoStar => "costar",
        }
    }

    pub fn template_file(self) -> String {
        format!("{}.txt", self.code())
    }

    pub fn generic_context(self) -> &'static str {
        match self {
            Self::CoStar => COSTAR_GENERIC_CONTEXT,
            _ => GENERIC_CONTEXT,
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TaskOriented => "TO",
            Self::RoleOriented => "RO",
            Self::CoStar => "CO-STAR",
        })
    }
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "to" | "task" | "task-oriented" => Ok(Self::TaskOriented),
            "ro" | "role" | "role-oriented" => Ok(Self::RoleOriented),
            "costar" | "co-star" => Ok(Self::CoStar),
            _ => Err(PromptError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    CveDescription,
    GenericSuspicion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedContext {
    pub source: ContextSource,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub context_source: ContextSource,
    /// The template with its placeholder substituted.
    pub text: String,
    pub attached_code: String,
}

impl RenderedPrompt {
    /// The full message sent to a backend.
    pub fn message(&self) -> String {
        let mut m = self.text.clone();
        if !m.ends_with('\n') {
            m.push('\n');
        }
        m.push_str(CODE_SEPARATOR);
        m.push('\n');
        m.push_str(&self.attached_code);
        m
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("{0}: training prompt for a vulnerable sample needs a CVE description")]
    MissingDescription(String),
    #[error("template for {0} is missing")]
    UnknownTemplate(PromptKind),
    #[error("template for {kind} must contain `{{{{CONTEXT}}}}` exactly once, found {found}")]
    BadTemplate { kind: PromptKind, found: usize },
    #[error("unknown prompt kind `{0}` (expected to, ro or costar)")]
    UnknownKind(String),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
}

/// Picks the context block for a sample in a given phase.
///
/// Only vulnerable samples in training see their CVE description. Fixed
/// training samples and all evaluation samples get the generic suspicion
/// text, so at evaluation time the two kinds differ only in their code.
pub fn select_context(sample: &Sample, phase: Phase, kind: PromptKind) -> Result<SelectedContext, PromptError> {
    match (phase, sample.kind) {
        (Phase::Training, SampleKind::Vulnerable) => {
            if sample.description.trim().is_empty() {
                return Err(PromptError::MissingDescription(sample.sample_id.clone()));
            }
            Ok(SelectedContext { source: ContextSource::CveDescription, text: normalize(&sample.description) })
        }
        _ => Ok(SelectedContext { source: ContextSource::GenericSuspicion, text: kind.generic_context().to_string() }),
    }
}

fn normalize(s: &str) -> String {
    s.replace("\r\n", "\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    to: String,
    ro: String,
    costar: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        Self { to: normalize(BUILTIN_TO), ro: normalize(BUILTIN_RO), costar: normalize(BUILTIN_COSTAR) }
    }

    /// Loads `to.txt`, `ro.txt` and `costar.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |kind: PromptKind| -> Result<String, PromptError> {
            let text = std::fs::read_to_string(dir.join(kind.template_file()))
                .map_err(|_| PromptError::UnknownTemplate(kind))?;
            let text = normalize(&text);
            let found = text.matches(CONTEXT_PLACEHOLDER).count();
            if found != 1 {
                return Err(PromptError::BadTemplate { kind, found });
            }
            Ok(text)
        };
        Ok(Self {
            to: load(PromptKind::TaskOriented)?,
            ro: load(PromptKind::RoleOriented)?,
            costar: load(PromptKind::CoStar)?,
        })
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        match kind {
            PromptKind::TaskOriented => &self.to,
            PromptKind::RoleOriented => &self.ro,
            PromptKind::CoStar => &self.costar,
        }
    }

    pub fn render(&self, kind: PromptKind, context: &SelectedContext, code: &str) -> Result<RenderedPrompt, PromptError> {
        if context.text.trim().is_empty() {
            return Err(PromptError::EmptyInput("context"));
        }
        if code.trim().is_empty() {
            return Err(PromptError::EmptyInput("code"));
        }
        let text = self.template(kind).replacen(CONTEXT_PLACEHOLDER, &normalize(&context.text), 1);
        Ok(RenderedPrompt { kind, context_source: context.source, text, attached_code: normalize(code) })
    }
}

/// Renders with the built-in templates.
pub fn render_prompt(kind: PromptKind, context: &SelectedContext, code: &str) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::builtin().render(kind, context, code)
}
