//! Fine-tuning dataset export, trainer configuration and LoRA arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{Label, Report};
use crate::prompt::{Phase, PromptKind};
use crate::select::SplitRound;

/// Instruction shared by every exported record.
pub const INSTRUCTION: &str = include_str!("../templates/instruction.txt");

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("no {phase:?} report for {sample_id} from {backend}/{kind}")]
    MissingReport { sample_id: String, backend: String, kind: PromptKind, phase: Phase },
    #[error("more than one report for {0}")]
    DuplicateReport(String),
    #[error("report {0} is labeled against its sample kind")]
    LabelMismatch(String),
    #[error("round {0} selected nothing to train on")]
    EmptyTrainingSet(usize),
    #[error("report filter selects no backend or prompt kind")]
    EmptyFilter,
    #[error("unknown training config field `{0}`")]
    UnknownField(String),
    #[error("training config field `{field}` is invalid: {message}")]
    InvalidValue { field: String, message: String },
    #[error("matrix shapes do not conform: {0}")]
    ShapeMismatch(String),
    #[error("rank {r} exceeds min({d}, {k})")]
    InvalidRank { d: usize, k: usize, r: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl TrainRecord {
    pub fn from_report(r: &Report) -> Self {
        Self { instruction: INSTRUCTION.trim_end().to_string(), input: r.text.clone(), output: r.label.as_str().to_string() }
    }
}

/// Which (backend, prompt kind) combinations go into an export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFilter {
    pub backends: Vec<String>,
    pub prompt_kinds: Vec<PromptKind>,
}

impl ReportFilter {
    fn combos(&self) -> Vec<(&str, PromptKind)> {
        self.backends.iter().flat_map(|b| self.prompt_kinds.iter().map(move |k| (b.as_str(), *k))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundExport {
    pub round_index: usize,
    pub train: Vec<TrainRecord>,
    pub eval: Vec<TrainRecord>,
}

/// Training records come from training-phase reports on the round's selected
/// ids, evaluation records from evaluation-phase reports on the held-out ids.
/// Records follow id order, then filter order.
pub fn export_training_set(
    reports: &[Report],
    round: &SplitRound,
    filter: &ReportFilter,
    truth: &BTreeMap<String, Label>,
) -> Result<RoundExport, FinetuneError> {
    if round.selected_ids.is_empty() {
        return Err(FinetuneError::EmptyTrainingSet(round.round_index));
    }
    let combos = filter.combos();
    if combos.is_empty() {
        return Err(FinetuneError::EmptyFilter);
    }
    let mut index: BTreeMap<(&str, &str, PromptKind, Phase), &Report> = BTreeMap::new();
    for r in reports {
        if index.insert((&r.sample_id, &r.backend_name, r.prompt_kind, r.phase), r).is_some() {
            return Err(FinetuneError::DuplicateReport(r.report_id.clone()));
        }
    }
    let collect = |ids: &[String], phase: Phase| -> Result<Vec<TrainRecord>, FinetuneError> {
        let mut out = Vec::with_capacity(ids.len() * combos.len());
        for id in ids {
            for &(backend, kind) in &combos {
                let r = index.get(&(id.as_str(), backend, kind, phase)).ok_or_else(|| FinetuneError::MissingReport {
                    sample_id: id.clone(),
                    backend: backend.to_string(),
                    kind,
                    phase,
                })?;
                if truth.get(id) != Some(&r.label) {
                    return Err(FinetuneError::LabelMismatch(r.report_id.clone()));
                }
                out.push(TrainRecord::from_report(r));
            }
        }
        Ok(out)
    };
    Ok(RoundExport {
        round_index: round.round_index,
        train: collect(&round.selected_ids, Phase::Training)?,
        eval: collect(&round.held_out_ids, Phase::Evaluation)?,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> FinetuneError {
    FinetuneError::Io(format!("{}: {e}", path.display()))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

/// Writes `train.jsonl`, `train.json`, `eval.jsonl` and `dataset_info.json`
/// into `dir`.
pub fn write_round_export(dir: &Path, export: &RoundExport) -> Result<(), FinetuneError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("train.jsonl", to_jsonl(&export.train))?;
    write("eval.jsonl", to_jsonl(&export.eval))?;
    write("train.json", serde_json::to_string_pretty(&export.train).expect("records serialize") + "\n")?;
    let info = serde_json::json!({
        "halu_train": {
            "file_name": "train.json",
            "columns": {"prompt": "instruction", "query": "input", "response": "output"}
        }
    });
    write("dataset_info.json", serde_json::to_string_pretty(&info).expect("static json") + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_model: String,
    pub adapter: String,
    pub lora_rank: u32,
    pub lora_targets: Vec<String>,
    pub lr_schedule: String,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    pub precision: String,
    pub epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_model: "gemma-7b".into(),
            adapter: "lora".into(),
            lora_rank: 8,
            lora_targets: vec!["q_proj".into(), "v_proj".into()],
            lr_schedule: "cosine".into(),
            lr_init: 1e-6,
            weight_decay: 1e-4,
            batch_size: 2,
            grad_accum_steps: 2,
            precision: "fp16".into(),
            epochs: 350,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |field: &str, message: &str| Err(FinetuneError::InvalidValue { field: field.into(), message: message.into() });
        if self.lora_rank == 0 {
            return bad("lora_rank", "must be positive");
        }
        if self.lora_targets.is_empty() {
            return bad("lora_targets", "must not be empty");
        }
        if !(self.lr_init > 0.0) {
            return bad("lr_init", "must be positive");
        }
        if !(self.weight_decay > 0.0) {
            return bad("weight_decay", "must be positive");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return bad("batch_size/grad_accum_steps/epochs", "must be positive");
        }
        Ok(())
    }

    /// Defaults with `overrides` applied field by field.
    pub fn with_overrides(overrides: &BTreeMap<String, Value>) -> Result<Self, FinetuneError> {
        let mut map = match serde_json::to_value(Self::default()).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        for (k, v) in overrides {
            match map.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(FinetuneError::UnknownField(k.clone())),
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(map))
            .map_err(|e| FinetuneError::InvalidValue { field: overrides.keys().cloned().collect::<Vec<_>>().join(","), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with keys in lexicographic order.
    pub fn to_json(&self) -> String {
        // serde_json's Map is ordered by key
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }
}

pub fn emit_train_config(path: &Path, overrides: &BTreeMap<String, Value>) -> Result<TrainConfig, FinetuneError> {
    let cfg = TrainConfig::with_overrides(overrides)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, cfg.to_json()).map_err(|e| io_err(path, e))?;
    Ok(cfg)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FinetuneError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(FinetuneError::ShapeMismatch(format!("{rows}x{cols} with {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FinetuneError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FinetuneError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// `W` (d×k) plus the low-rank pair `A` (d×r) and `B` (r×k).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    w: Matrix,
    a: Matrix,
    b: Matrix,
}

impl LoraFactors {
    pub fn new(w: Matrix, a: Matrix, b: Matrix) -> Result<Self, FinetuneError> {
        let (d, k, r) = (w.rows, w.cols, a.cols);
        if a.rows != d || b.rows != r || b.cols != k {
            return Err(FinetuneError::ShapeMismatch(format!(
                "W {d}x{k}, A {}x{}, B {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        if r > d.min(k) {
            return Err(FinetuneError::InvalidRank { d, k, r });
        }
        Ok(Self { w, a, b })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }
}

/// `W' = W + AB`.
pub fn lora_effective_weight(f: &LoraFactors) -> Matrix {
    let (d, k, r) = (f.w.rows, f.w.cols, f.a.cols);
    let mut out = f.w.clone();
    for i in 0..d {
        for j in 0..k {
            let mut update = 0.0;
            for t in 0..r {
                update += f.a.at(i, t) * f.b.at(t, j);
            }
            out.data[i * k + j] += update;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSaving {
    /// `r * (d + k)`
    pub trainable: u64,
    /// `d * k`
    pub full: u64,
    pub ratio: f64,
}

pub fn lora_param_saving(d: usize, k: usize, r: usize) -> Result<ParamSaving, FinetuneError> {
    if d == 0 || k == 0 || r == 0 || r > d.min(k) {
        return Err(FinetuneError::InvalidRank { d, k, r });
    }
    let trainable = r as u64 * (d as u64 + k as u64);
    let full = d as u64 * k as u64;
    let ratio = trainable as f64 / full as f64;
    if ratio >= 1.0 {
        log::warn!("rank {r} on a {d}x{k} weight trains {trainable} parameters, no fewer than the full {full}");
    }
    Ok(ParamSaving { trainable, full, ratio })
}

/// Ids that appear on both sides of a set of exports would leak evaluation
/// data; returns them.
pub fn overlapping_ids(round: &SplitRound) -> BTreeSet<&str> {
    let sel: BTreeSet<&str> = round.selected_ids.iter().map(String::as_str).collect();
    round.held_out_ids.iter().map(String::as_str).filter(|id| sel.contains(id)).collect()
}
