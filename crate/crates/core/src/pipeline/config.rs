use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::finetune::ReportFilter;
use crate::gateway::{BackendSpec, RetryPolicy};
use crate::prompt::PromptKind;

/// Environment variable that replaces `run_dir`.
pub const RUN_DIR_ENV: &str = "HALU_RUN_DIR";

/// What gets embedded for the diverse split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedInput {
    /// The sample's code.
    #[default]
    Sample,
    /// The evaluation-phase report of the first configured backend and prompt kind.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
    /// Defaults to `<corpus_dir>/manifest.csv`.
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    /// Defaults to the built-in templates.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_prompt")]
    pub prompt_kind: PromptKind,
    /// Extra prompt kinds to generate reports for. `prompt_kind` is always included.
    #[serde(default)]
    pub extra_prompt_kinds: Vec<PromptKind>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_rounds")]
    pub k_rounds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub mock_mode: bool,
    /// Probability that a mock generator inverts its marker placement.
    #[serde(default = "default_noise")]
    pub mock_noise: f64,
    #[serde(default)]
    pub pair_lock: bool,
    #[serde(default)]
    pub embed_input: EmbedInput,
    /// Report generators.
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    /// The fine-tuned classifier. `model_id` may contain `{round}`.
    #[serde(default)]
    pub classifier: Option<BackendSpec>,
    #[serde(default)]
    pub embedder: Option<BackendSpec>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub train_overrides: BTreeMap<String, serde_json::Value>,
    /// Restricts export, classification and evaluation; defaults to every
    /// backend and prompt kind.
    #[serde(default)]
    pub report_filter: Option<ReportFilter>,
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_secs: u64,
}

fn default_prompt() -> PromptKind {
    PromptKind::CoStar
}
fn default_p() -> f64 {
    0.8
}
fn default_rounds() -> usize {
    5
}
fn default_in_flight() -> usize {
    4
}
fn default_noise() -> f64 {
    0.2
}
fn default_fetch_timeout() -> u64 {
    60
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mock: bool,
    pub seed: Option<u64>,
    pub prompt: Option<PromptKind>,
    pub rounds: Option<usize>,
    pub p: Option<f64>,
    pub report_filter: Option<Vec<String>>,
    pub pair_lock: bool,
}

pub const MOCK_BACKEND: &str = "mock-gen";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config { field: "config".into(), message: e.message().to_string() })
    }

    /// Reads a TOML file, resolves relative paths against its directory,
    /// applies `overrides` and `HALU_RUN_DIR`, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config { field: "config".into(), message: format!("{}: {e}", path.display()) })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve(&base, std::env::var_os(RUN_DIR_ENV).map(PathBuf::from));
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path, run_dir_override: Option<PathBuf>) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.corpus_dir = abs(&self.corpus_dir);
        self.run_dir = abs(&run_dir_override.unwrap_or_else(|| self.run_dir.clone()));
        self.manifest_path = Some(match &self.manifest_path {
            Some(m) => abs(m),
            None => self.corpus_dir.join("manifest.csv"),
        });
        self.templates_dir = self.templates_dir.as_deref().map(abs);
    }

    pub fn apply(&mut self, o: &Overrides) {
        self.mock_mode |= o.mock;
        self.pair_lock |= o.pair_lock;
        if let Some(s) = o.seed {
            self.base_seed = s;
        }
        if let Some(k) = o.prompt {
            self.prompt_kind = k;
            self.extra_prompt_kinds.clear();
        }
        if let Some(r) = o.rounds {
            self.k_rounds = r;
        }
        if let Some(p) = o.p {
            self.p = p;
        }
        if let Some(b) = &o.report_filter {
            let kinds = self.report_filter.as_ref().map(|f| f.prompt_kinds.clone()).unwrap_or_else(|| self.prompt_kinds());
            self.report_filter = Some(ReportFilter { backends: b.clone(), prompt_kinds: kinds });
        }
        if self.mock_mode && self.backends.is_empty() {
            self.backends.push(BackendSpec::named(MOCK_BACKEND));
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, message: String| Err(PipelineError::Config { field: field.into(), message });
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("p", format!("{} is outside (0, 1]", self.p));
        }
        if self.k_rounds == 0 {
            return bad("k_rounds", "must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mock_noise) {
            return bad("mock_noise", format!("{} is outside [0, 1]", self.mock_noise));
        }
        if self.backends.is_empty() {
            return bad("backends", "no report generator configured".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate().map_err(|e| PipelineError::Config { field: "backends".into(), message: e.to_string() })?;
            if !names.insert(b.name.as_str()) {
                return bad("backends", format!("duplicate backend name {}", b.name));
            }
        }
        if !self.mock_mode {
            if self.classifier.is_none() {
                return bad("classifier", "required unless mock_mode is set".into());
            }
            if self.embedder.is_none() {
                return bad("embedder", "required unless mock_mode is set".into());
            }
        }
        if let Some(f) = &self.report_filter {
            if f.backends.is_empty() || f.prompt_kinds.is_empty() {
                return bad("report_filter", "selects nothing".into());
            }
            if let Some(b) = f.backends.iter().find(|b| !names.contains(b.as_str())) {
                return bad("report_filter", format!("unknown backend {b}"));
            }
            if let Some(k) = f.prompt_kinds.iter().find(|k| !self.prompt_kinds().contains(k)) {
                return bad("report_filter", format!("prompt kind {} is not generated", k.code()));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest_path.clone().unwrap_or_else(|| self.corpus_dir.join("manifest.csv"))
    }

    /// `prompt_kind` first, then the extras, without repeats.
    pub fn prompt_kinds(&self) -> Vec<PromptKind> {
        let mut out = vec![self.prompt_kind];
        for k in &self.extra_prompt_kinds {
            if !out.contains(k) {
                out.push(*k);
            }
        }
        out
    }

    pub fn effective_filter(&self) -> ReportFilter {
        self.report_filter.clone().unwrap_or_else(|| ReportFilter {
            backends: self.backends.iter().map(|b| b.name.clone()).collect(),
            prompt_kinds: self.prompt_kinds(),
        })
    }
}
