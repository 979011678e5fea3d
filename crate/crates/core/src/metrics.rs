//! Confusion counts, classification metrics and cross-round aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{categorize_cwe, CweCategory};
use crate::gateway::{Classification, Label};
use crate::select::CwePartition;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no ground truth for {0}")]
    UnknownSample(String),
    #[error("{0} was classified more than once")]
    DuplicatePrediction(String),
    #[error("nothing was evaluated")]
    EmptyEvaluation,
    #[error("no rounds to aggregate")]
    NoRounds,
    #[error("no CWE recorded for {0}")]
    MissingCwe(String),
    #[error("unknown CWE id {0}")]
    UnknownCwe(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
        }
    }
}

pub fn confusion(classifications: &[Classification], truth: &BTreeMap<String, Label>) -> Result<ConfusionMatrix, MetricsError> {
    let mut seen = BTreeSet::new();
    let mut cm = ConfusionMatrix::default();
    for c in classifications {
        let t = truth.get(&c.sample_id).ok_or_else(|| MetricsError::UnknownSample(c.sample_id.clone()))?;
        if !seen.insert(c.sample_id.as_str()) {
            return Err(MetricsError::DuplicatePrediction(c.sample_id.clone()));
        }
        cm.record(c.predicted, *t);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// No predicted positives.
    PrecisionZeroDenominator,
    /// No actual positives.
    RecallZeroDenominator,
    /// Precision and recall both zero.
    F1ZeroDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub degenerate_flags: BTreeSet<Degenerate>,
}

impl MetricsBundle {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }
}

/// Zero denominators give 0 and a flag.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsBundle, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut flags = BTreeSet::new();
    let ratio = |num: u64, den: u64, flag: Degenerate, flags: &mut BTreeSet<Degenerate>| {
        if den == 0 {
            flags.insert(flag);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp, Degenerate::PrecisionZeroDenominator, &mut flags);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, Degenerate::RecallZeroDenominator, &mut flags);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.insert(Degenerate::F1ZeroDenominator);
        0.0
    };
    Ok(MetricsBundle { accuracy: (cm.tp + cm.tn) as f64 / total as f64, precision, recall, f1, degenerate_flags: flags })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub gmean: f64,
    pub max_up: f64,
    pub max_down: f64,
    pub rounds: Vec<f64>,
    /// Set when some round scored exactly 0, which pins the mean to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_round: bool,
}

/// Geometric mean of the per-round values with the largest deviations above
/// and below it.
pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoRounds);
    }
    let zero_round = values.iter().any(|&v| v <= 0.0);
    let gmean = if zero_round {
        0.0
    } else {
        (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
    };
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Aggregate {
        gmean,
        max_up: (max - gmean).max(0.0),
        max_down: (gmean - min).max(0.0),
        rounds: values.to_vec(),
        zero_round,
    })
}

pub type AggregateMetrics = BTreeMap<Metric, Aggregate>;

pub fn aggregate_rounds(rounds: &[MetricsBundle]) -> Result<AggregateMetrics, MetricsError> {
    if rounds.is_empty() {
        return Err(MetricsError::NoRounds);
    }
    Metric::ALL
        .iter()
        .map(|&m| Ok((m, aggregate(&rounds.iter().map(|b| b.get(m)).collect::<Vec<_>>())?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenVerdict {
    pub cwe_id: String,
    pub sample_id: String,
    pub predictable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub per_category: BTreeMap<CweCategory, CategoryResult>,
    pub unseen: Vec<UnseenVerdict>,
    /// Share of unseen-CWE positives classified correctly; absent when none
    /// were evaluated.
    pub unseen_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsBundle,
}

/// Metrics per CWE category, and a predictable/not verdict for every
/// evaluated positive sample whose CWE is unseen.
pub fn breakdown(
    classifications: &[Classification],
    truth: &BTreeMap<String, Label>,
    cwe_map: &BTreeMap<String, String>,
    partition: &CwePartition,
) -> Result<Breakdown, MetricsError> {
    // validates ids and duplicates once
    confusion(classifications, truth)?;
    let mut per: BTreeMap<CweCategory, ConfusionMatrix> = BTreeMap::new();
    let mut unseen = Vec::new();
    for c in classifications {
        let t = truth[&c.sample_id];
        let cwe = cwe_map.get(&c.sample_id).ok_or_else(|| MetricsError::MissingCwe(c.sample_id.clone()))?;
        let cat = categorize_cwe(cwe).map_err(|_| MetricsError::UnknownCwe(cwe.clone()))?;
        per.entry(cat).or_default().record(c.predicted, t);
        if t == Label::Positive && partition.is_unseen(cwe) {
            unseen.push(UnseenVerdict { cwe_id: cwe.clone(), sample_id: c.sample_id.clone(), predictable: c.predicted == t });
        }
    }
    unseen.sort_by(|a, b| (&a.cwe_id, &a.sample_id).cmp(&(&b.cwe_id, &b.sample_id)));
    let unseen_accuracy =
        (!unseen.is_empty()).then(|| unseen.iter().filter(|u| u.predictable).count() as f64 / unseen.len() as f64);
    let per_category = per
        .into_iter()
        .map(|(k, cm)| Ok((k, CategoryResult { confusion: cm, metrics: metrics(&cm)? })))
        .collect::<Result<_, MetricsError>>()?;
    Ok(Breakdown { per_category, unseen, unseen_accuracy })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub prompt: String,
    pub aggregate: AggregateMetrics,
}

/// Markdown table with one row per (model, prompt), every metric shown as a
/// percentage with its upward and downward deviation.
pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("| Model | Prompt | Accuracy | Precision | Recall | F1 |\n|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} |", r.model, r.prompt));
        for m in Metric::ALL {
            match r.aggregate.get(&m) {
                Some(a) => out.push_str(&format!(
                    " {:.1} (+{:.1}/-{:.1}) |",
                    a.gmean * 100.0,
                    a.max_up * 100.0,
                    a.max_down * 100.0
                )),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
