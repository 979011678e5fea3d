//! Embedding vectors, cosine similarity and the greedy diverse split.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CveEntry;
use crate::gateway::{EmbeddingBackend, GatewayError};
use crate::par::{self, Exec};

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding for {0} is all zeros")]
    ZeroVector(String),
    #[error("embedding for {0} has a non-finite entry")]
    NonFinite(String),
    #[error("no embedding for {0}")]
    MissingVector(String),
    #[error("selection fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("at least one round is required")]
    InvalidRounds,
    #[error("nothing to select from")]
    EmptyPopulation,
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("cannot embed empty text for {0}")]
    EmptyText(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

/// A non-zero, finite embedding. The Euclidean norm is computed once at
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingRecord", into = "EmbeddingRecord")]
pub struct EmbeddingVector {
    source_id: String,
    values: Vec<f64>,
    norm: f64,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    dim: usize,
    values: Vec<f64>,
}

impl TryFrom<EmbeddingRecord> for EmbeddingVector {
    type Error = String;

    fn try_from(r: EmbeddingRecord) -> Result<Self, String> {
        if r.dim != r.values.len() {
            return Err(format!("{}: dim {} but {} values", r.id, r.dim, r.values.len()));
        }
        EmbeddingVector::new(r.id, r.values).map_err(|e| e.to_string())
    }
}

impl From<EmbeddingVector> for EmbeddingRecord {
    fn from(v: EmbeddingVector) -> Self {
        EmbeddingRecord { id: v.source_id, dim: v.values.len(), values: v.values }
    }
}

impl EmbeddingVector {
    pub fn new(source_id: impl Into<String>, values: Vec<f64>) -> Result<Self, SelectError> {
        let source_id = source_id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SelectError::NonFinite(source_id));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(SelectError::ZeroVector(source_id));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { source_id, values, norm })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// `(u·w) / (‖u‖‖w‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &EmbeddingVector, w: &EmbeddingVector) -> Result<f64, SelectError> {
    if u.dim() != w.dim() {
        return Err(SelectError::DimensionMismatch(u.dim(), w.dim()));
    }
    let dot: f64 = u.values.iter().zip(&w.values).map(|(a, b)| a * b).sum();
    Ok((dot / (u.norm * w.norm)).clamp(-1.0, 1.0))
}

pub fn embed(backend: &dyn EmbeddingBackend, source_id: &str, text: &str) -> Result<EmbeddingVector, SelectError> {
    if text.trim().is_empty() {
        return Err(SelectError::EmptyText(source_id.to_string()));
    }
    EmbeddingVector::new(source_id, backend.embed(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRound {
    pub round_index: usize,
    pub seed: u64,
    pub p: f64,
    /// The fine-tuning set, in selection order.
    pub selected_ids: Vec<String>,
    /// The evaluation set, in input order.
    pub held_out_ids: Vec<String>,
}

/// `ceil(p * n)`. The product is nudged down by a hair first so that
/// values like `0.7 * 10` do not round up past the exact integer.
pub fn target_size(n: usize, p: f64) -> usize {
    let raw = p * n as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1, n.max(1))
}

fn check_fraction(p: f64) -> Result<(), SelectError> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(SelectError::InvalidFraction(p))
    }
}

fn lookup<'a>(
    ids: &[String],
    vectors: &'a BTreeMap<String, EmbeddingVector>,
) -> Result<Vec<&'a EmbeddingVector>, SelectError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(SelectError::DuplicateId(id.clone()));
        }
        out.push(vectors.get(id).ok_or_else(|| SelectError::MissingVector(id.clone()))?);
    }
    if let Some(first) = out.first() {
        if let Some(bad) = out.iter().find(|v| v.dim() != first.dim()) {
            return Err(SelectError::DimensionMismatch(first.dim(), bad.dim()));
        }
    }
    Ok(out)
}

/// Greedy diverse selection.
///
/// A seeded draw picks the first item. After that, each pick is the
/// remaining item least similar to the one picked just before it. Ties go to
/// the item that comes first in `ids`. Selection stops at `ceil(p * N0)`
/// items, where `N0` is the size of the starting population.
///
/// `exec` only affects how the per-step similarity scan runs.
pub fn diverse_select(
    ids: &[String],
    vectors: &BTreeMap<String, EmbeddingVector>,
    p: f64,
    seed: u64,
    exec: Exec,
) -> Result<SplitRound, SelectError> {
    check_fraction(p)?;
    if ids.is_empty() {
        return Err(SelectError::EmptyPopulation);
    }
    let vecs = lookup(ids, vectors)?;
    let order = select_positions(&vecs, p, seed, exec);
    Ok(split_from_positions(ids, &order, 0, seed, p))
}

fn select_positions(vecs: &[&EmbeddingVector], p: f64, seed: u64, exec: Exec) -> Vec<usize> {
    let n = vecs.len();
    let target = target_size(n, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);

    // positions still unselected, kept in input order so the lowest index wins ties
    let mut remaining: Vec<usize> = (0..n).filter(|&i| i != first).collect();
    let mut order = vec![first];
    while order.len() < target {
        let last = vecs[*order.last().expect("non-empty")];
        let pick = par::argmin(exec, remaining.len(), |j| {
            cosine_similarity(vecs[remaining[j]], last).expect("dimensions checked")
        })
        .expect("remaining is non-empty while below target");
        order.push(remaining.remove(pick));
    }
    order
}

fn split_from_positions(ids: &[String], order: &[usize], round_index: usize, seed: u64, p: f64) -> SplitRound {
    let chosen: BTreeSet<usize> = order.iter().copied().collect();
    SplitRound {
        round_index,
        seed,
        p,
        selected_ids: order.iter().map(|&i| ids[i].clone()).collect(),
        held_out_ids: (0..ids.len()).filter(|i| !chosen.contains(i)).map(|i| ids[i].clone()).collect(),
    }
}

/// `k_rounds` independent splits; round `i` is seeded with `base_seed + i`.
/// Rounds run in parallel under [`Exec::Parallel`]; each round's scan is
/// sequential.
pub fn make_rounds(
    ids: &[String],
    vectors: &BTreeMap<String, EmbeddingVector>,
    k_rounds: usize,
    p: f64,
    base_seed: u64,
    exec: Exec,
) -> Result<Vec<SplitRound>, SelectError> {
    if k_rounds == 0 {
        return Err(SelectError::InvalidRounds);
    }
    check_fraction(p)?;
    if ids.is_empty() {
        return Err(SelectError::EmptyPopulation);
    }
    let vecs = lookup(ids, vectors)?;
    let rounds: Vec<usize> = (0..k_rounds).collect();
    Ok(par::map(exec, &rounds, |&i| {
        let seed = base_seed.wrapping_add(i as u64);
        let order = select_positions(&vecs, p, seed, Exec::Sequential);
        split_from_positions(ids, &order, i, seed, p)
    }))
}

/// Like [`make_rounds`], but keeps every group (for example the two samples
/// of one CVE) on the same side. Groups are selected by the mean of their
/// members' vectors and the target is `ceil(p * number_of_groups)`.
pub fn make_grouped_rounds(
    ids: &[String],
    group_of: &BTreeMap<String, String>,
    vectors: &BTreeMap<String, EmbeddingVector>,
    k_rounds: usize,
    p: f64,
    base_seed: u64,
    exec: Exec,
) -> Result<Vec<SplitRound>, SelectError> {
    let vecs = lookup(ids, vectors)?;
    let mut group_ids: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let g = group_of.get(id).cloned().unwrap_or_else(|| id.clone());
        let slot = members.entry(g.clone()).or_default();
        if slot.is_empty() {
            group_ids.push(g);
        }
        slot.push(i);
    }
    let mut group_vectors = BTreeMap::new();
    for g in &group_ids {
        let idx = &members[g];
        let dim = vecs[idx[0]].dim();
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(vecs[i].values()) {
                *m += v / idx.len() as f64;
            }
        }
        // members pointing in opposite directions can cancel; fall back to the first
        let v = EmbeddingVector::new(g.clone(), mean).or_else(|_| EmbeddingVector::new(g.clone(), vecs[idx[0]].values().to_vec()))?;
        group_vectors.insert(g.clone(), v);
    }
    let rounds = make_rounds(&group_ids, &group_vectors, k_rounds, p, base_seed, exec)?;
    let expand = |gs: &[String]| -> Vec<String> {
        gs.iter().flat_map(|g| members[g].iter().map(|&i| ids[i].clone())).collect()
    };
    Ok(rounds
        .into_iter()
        .map(|r| {
            let mut held: Vec<String> = expand(&r.held_out_ids);
            let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            held.sort_by_key(|s| pos[s.as_str()]);
            SplitRound { selected_ids: expand(&r.selected_ids), held_out_ids: held, ..r }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CwePartition {
    /// CWEs carried by more than one record.
    pub seen_cwes: BTreeSet<String>,
    /// CWEs carried by exactly one record.
    pub unseen_cwes: BTreeSet<String>,
}

impl CwePartition {
    pub fn is_unseen(&self, cwe: &str) -> bool {
        self.unseen_cwes.contains(cwe)
    }
}

pub fn partition_unseen_cwe(entries: &[CveEntry]) -> CwePartition {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.cwe_id.as_str()).or_default() += 1;
    }
    let mut part = CwePartition::default();
    for (cwe, n) in counts {
        if n == 1 {
            part.unseen_cwes.insert(cwe.to_string());
        } else {
            part.seen_cwes.insert(cwe.to_string());
        }
    }
    part
}
