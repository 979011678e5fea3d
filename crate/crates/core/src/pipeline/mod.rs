//! Stage orchestration over a versioned run directory.
//!
//! Every stage reads its inputs from the run directory (or the corpus
//! directory for ingestion), writes its outputs there and can be rerun on
//! its own. Nothing written depends on wall-clock time.

mod config;
mod stages;
pub mod store;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use config::{EmbedInput, Overrides, RunConfig, MOCK_BACKEND, RUN_DIR_ENV};
pub use stages::{ClassificationRecord, PromptRecord};

/// Written to `<run_dir>/pipeline_version`; stages refuse other versions.
pub const PIPELINE_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("stage {stage} needs {artifact}; run the earlier stage first")]
    MissingStageInput { stage: Stage, artifact: String },
    #[error("run directory was written by pipeline version {found}, this is version {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stage {stage}: {failed} of {total} items failed (successes were kept)")]
    PartialFailure { stage: Stage, failed: usize, total: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Extract,
    Prompt,
    Generate,
    Select,
    ExportTrain,
    Classify,
    Evaluate,
    Census,
}

impl Stage {
    /// The order `all` runs in.
    pub const PIPELINE: [Stage; 9] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::Census,
        Stage::Prompt,
        Stage::Generate,
        Stage::Select,
        Stage::ExportTrain,
        Stage::Classify,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Prompt => "prompt",
            Stage::Generate => "generate",
            Stage::Select => "select",
            Stage::ExportTrain => "export-train",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Census => "census",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::PIPELINE.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// A stage or the whole pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    All,
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            Ok(Command::All)
        } else {
            s.parse().map(Command::Stage)
        }
    }
}

fn ensure_version(run_dir: &Path) -> Result<(), PipelineError> {
    let stamp = run_dir.join("pipeline_version");
    match std::fs::read_to_string(&stamp) {
        Ok(found) if found.trim() == PIPELINE_VERSION => Ok(()),
        Ok(found) => Err(PipelineError::VersionMismatch { found: found.trim().to_string(), expected: PIPELINE_VERSION.into() }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => store::write_atomic(&stamp, format!("{PIPELINE_VERSION}\n").as_bytes()),
        Err(e) => Err(PipelineError::Io(format!("{}: {e}", stamp.display()))),
    }
}

/// Runs one command. Returns human-readable summary lines.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    ensure_version(&cfg.run_dir)?;
    store::write_json(&cfg.run_dir.join("config.json"), cfg)?;
    let stages: Vec<Stage> = match command {
        Command::All => Stage::PIPELINE.to_vec(),
        Command::Stage(s) => vec![s],
    };
    let mut lines = Vec::new();
    for s in stages {
        log::info!("running stage {s}");
        let out = stages::run_stage(s, cfg)?;
        lines.extend(out.into_iter().map(|l| format!("[{s}] {l}")));
    }
    Ok(lines)
}
