use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::{EmbedInput, RunConfig};
use super::store::{append_jsonl, read_json, read_jsonl, write_json, write_jsonl, write_atomic};
use super::{PipelineError, Stage};
use crate::corpus::{
    self, build_samples, census, fetch_all, parse_manifest, parse_unified_diff, CveEntry, FetchResponse, HttpFetcher,
    PatchCache, PatchFetcher, Sample,
};
use crate::finetune::{emit_train_config, export_training_set, write_round_export};
use crate::gateway::{
    classify_all, finish_report, generate_all, report_id, BackendSpec, ChatClient, Classification, ClassifierBackend,
    EmbeddingBackend, GeneratorBackend, KeywordClassifier, Label, MockEmbedder, MockGenerator, Report, ReportJob,
    WireClassifier, WireEmbedder, WireGenerator,
};
use crate::metrics::{aggregate_rounds, breakdown, confusion, markdown_table, metrics, Breakdown, ConfusionMatrix, MetricsBundle, SummaryRow};
use crate::par::{self, Exec};
use crate::prompt::{select_context, Phase, PromptKind, RenderedPrompt, TemplateSet};
use crate::select::{embed, make_grouped_rounds, make_rounds, partition_unseen_cwe, CwePartition, EmbeddingVector, SplitRound};

const ENTRIES: &str = "entries.json";
const INGEST: &str = "ingest.json";
const SAMPLES: &str = "samples.jsonl";
const EXTRACT: &str = "extract.json";
const CENSUS: &str = "census.json";
const PROMPTS: &str = "prompts.jsonl";
const REPORTS: &str = "reports.jsonl";
const GENERATE_FAILURES: &str = "generate_failures.json";
const EMBEDDINGS: &str = "embeddings.jsonl";
const EMBEDDINGS_META: &str = "embeddings_meta.json";
const ROUNDS: &str = "rounds.json";
const PARTITION: &str = "partition.json";
const TRAIN_CONFIG: &str = "train_config.json";
const CLASSIFICATIONS: &str = "classifications.jsonl";
const METRICS_JSON: &str = "metrics.json";
const METRICS_MD: &str = "metrics.md";

fn fail(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

fn input(cfg: &RunConfig, stage: Stage, name: &str) -> Result<PathBuf, PipelineError> {
    let p = cfg.run_dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(PipelineError::MissingStageInput { stage, artifact: name.to_string() })
    }
}

pub(super) fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    match stage {
        Stage::Ingest => ingest(cfg),
        Stage::Extract => extract(cfg),
        Stage::Census => run_census(cfg),
        Stage::Prompt => prompt(cfg),
        Stage::Generate => generate(cfg),
        Stage::Select => select(cfg),
        Stage::ExportTrain => export_train(cfg),
        Stage::Classify => classify(cfg),
        Stage::Evaluate => evaluate(cfg),
    }
}

fn load_manifest(cfg: &RunConfig, stage: Stage) -> Result<Vec<CveEntry>, PipelineError> {
    let path = cfg.manifest_path();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PipelineError::Config { field: "manifest_path".into(), message: format!("{}: {e}", path.display()) })?;
    parse_manifest(&text).map_err(|e| fail(stage)(&e))
}

/// Refuses every request; used in mock mode so nothing leaves the machine.
struct Offline;

impl PatchFetcher for Offline {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String> {
        Err(format!("offline mode: {url} is not in the patch cache"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemFailure {
    id: String,
    error: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    fetched: Vec<String>,
    failed: Vec<ItemFailure>,
}

fn ingest(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let entries = load_manifest(cfg, Stage::Ingest)?;
    let cache = PatchCache::new(&cfg.corpus_dir);
    let fetcher: Box<dyn PatchFetcher> = if cfg.mock_mode {
        Box::new(Offline)
    } else {
        Box::new(HttpFetcher::new(Duration::from_secs(cfg.fetch_timeout_secs)).map_err(|e| fail(Stage::Ingest)(&e))?)
    };
    let results = fetch_all(&entries, fetcher.as_ref(), &cache, cfg.max_in_flight);
    let mut summary = IngestSummary { fetched: Vec::new(), failed: Vec::new() };
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(_) => summary.fetched.push(e.cve_id.clone()),
            Err(err) => {
                log::warn!("{}: {err}", e.cve_id);
                summary.failed.push(ItemFailure { id: e.cve_id.clone(), error: err.to_string() });
            }
        }
    }
    write_json(&cfg.run_dir.join(ENTRIES), &entries)?;
    write_json(&cfg.run_dir.join(INGEST), &summary)?;
    if summary.fetched.is_empty() {
        return Err(PipelineError::Stage { stage: Stage::Ingest, message: "no patch could be fetched".into() });
    }
    Ok(vec![format!("{} records, {} patches available, {} failed", entries.len(), summary.fetched.len(), summary.failed.len())])
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractSummary {
    built: Vec<String>,
    warnings: Vec<String>,
    failed: Vec<ItemFailure>,
}

fn extract(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let entries: Vec<CveEntry> = read_json(&input(cfg, Stage::Extract, ENTRIES)?)?;
    let cache = PatchCache::new(&cfg.corpus_dir);
    let descriptions = corpus::load_descriptions(&cfg.corpus_dir).map_err(|e| fail(Stage::Extract)(&e))?;
    let mut samples = Vec::new();
    let mut summary = ExtractSummary { built: Vec::new(), warnings: Vec::new(), failed: Vec::new() };
    for e in &entries {
        let Some(bytes) = cache.get(&e.cve_id) else {
            summary.failed.push(ItemFailure { id: e.cve_id.clone(), error: "patch not cached".into() });
            continue;
        };
        let built = parse_unified_diff(&e.cve_id, &String::from_utf8_lossy(&bytes)).and_then(|patch| {
            let pre = corpus::load_pre_sources(&cfg.corpus_dir, &patch);
            let desc = descriptions.get(&e.cve_id).map(String::as_str).unwrap_or("");
            build_samples(e, &patch, &pre, desc)
        });
        match built {
            Ok(pair) => {
                summary.built.push(e.cve_id.clone());
                summary.warnings.extend(pair.warnings.iter().map(|w| format!("{w:?}")));
                samples.push(pair.vulnerable);
                samples.push(pair.fixed);
            }
            Err(err) => summary.failed.push(ItemFailure { id: e.cve_id.clone(), error: err.to_string() }),
        }
    }
    write_jsonl(&cfg.run_dir.join(SAMPLES), &samples)?;
    write_json(&cfg.run_dir.join(EXTRACT), &summary)?;
    if samples.is_empty() {
        return Err(PipelineError::Stage { stage: Stage::Extract, message: "no samples could be built".into() });
    }
    Ok(vec![format!("{} samples from {} records, {} records failed", samples.len(), summary.built.len(), summary.failed.len())])
}

fn run_census(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let entries = load_manifest(cfg, Stage::Census)?;
    let samples_path = cfg.run_dir.join(SAMPLES);
    let samples: Vec<Sample> = if samples_path.exists() { read_jsonl(&samples_path)? } else { Vec::new() };
    let stats = census(&samples, &entries);
    write_json(&cfg.run_dir.join(CENSUS), &stats)?;
    let mut lines = vec![
        format!("records: {}", stats.n_records),
        format!("samples: {}", stats.n_samples),
        format!("CWEs: {}", stats.n_cwes),
        format!("programs: {}", stats.n_programs),
    ];
    if stats.functions_complete {
        lines.push(format!("functions: {}", stats.n_functions));
        lines.push(format!("LOC: {}", stats.n_loc));
    } else {
        lines.push(format!(
            "functions/LOC: partial ({} of {} records built; {} functions, {} lines so far)",
            stats.samples_built, stats.n_records, stats.n_functions, stats.n_loc
        ));
    }
    let mut top: Vec<(&String, &usize)> = stats.per_cwe_counts.iter().collect();
    top.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    lines.push(format!(
        "most common CWEs: {}",
        top.iter().take(5).map(|(c, n)| format!("{c}={n}")).collect::<Vec<_>>().join(", ")
    ));
    Ok(lines)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample_id: String,
    pub phase: Phase,
    pub prompt: RenderedPrompt,
}

fn templates(cfg: &RunConfig) -> Result<TemplateSet, PipelineError> {
    match &cfg.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir).map_err(|e| fail(Stage::Prompt)(&e)),
        None => Ok(TemplateSet::builtin()),
    }
}

fn prompt(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let samples: Vec<Sample> = read_jsonl(&input(cfg, Stage::Prompt, SAMPLES)?)?;
    let set = templates(cfg)?;
    let mut records = Vec::new();
    for s in &samples {
        let code = s.text();
        for kind in cfg.prompt_kinds() {
            for phase in [Phase::Training, Phase::Evaluation] {
                let ctx = select_context(s, phase, kind).map_err(|e| fail(Stage::Prompt)(&e))?;
                let prompt = set.render(kind, &ctx, &code).map_err(|e| fail(Stage::Prompt)(&e))?;
                records.push(PromptRecord { sample_id: s.sample_id.clone(), phase, prompt });
            }
        }
    }
    write_jsonl(&cfg.run_dir.join(PROMPTS), &records)?;
    Ok(vec![format!("{} prompts for {} samples", records.len(), samples.len())])
}

fn generator(cfg: &RunConfig, spec: &BackendSpec) -> Result<Box<dyn GeneratorBackend>, PipelineError> {
    if cfg.mock_mode {
        Ok(Box::new(MockGenerator::new(spec.name.clone(), cfg.base_seed, cfg.mock_noise)))
    } else {
        Ok(Box::new(WireGenerator(ChatClient::from_spec(spec).map_err(|e| fail(Stage::Generate)(&e))?)))
    }
}

fn generate(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let records: Vec<PromptRecord> = read_jsonl(&input(cfg, Stage::Generate, PROMPTS)?)?;
    let samples: Vec<Sample> = read_jsonl(&input(cfg, Stage::Generate, SAMPLES)?)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let path = cfg.run_dir.join(REPORTS);
    let existing: BTreeMap<String, Report> = if path.exists() {
        read_jsonl::<Report>(&path)?.into_iter().map(|r| (r.report_id.clone(), r)).collect()
    } else {
        BTreeMap::new()
    };

    let mut all = Vec::new();
    let mut failures = Vec::new();
    let mut fresh = 0;
    for spec in &cfg.backends {
        let backend = generator(cfg, spec)?;
        let rid = |r: &PromptRecord| report_id(&r.sample_id, &spec.name, r.prompt.kind, r.phase);
        // identical messages to one backend are generated once
        let mut texts: BTreeMap<(String, PromptKind), String> = BTreeMap::new();
        for r in &records {
            if let Some(rep) = existing.get(&rid(r)) {
                texts.entry((r.prompt.message(), r.prompt.kind)).or_insert_with(|| rep.text.clone());
            }
        }
        let mut jobs = Vec::new();
        let mut queued = BTreeSet::new();
        for r in &records {
            let key = (r.prompt.message(), r.prompt.kind);
            if texts.contains_key(&key) || !queued.insert(key) {
                continue;
            }
            let sample = by_id.get(r.sample_id.as_str()).ok_or_else(|| PipelineError::Stage {
                stage: Stage::Generate,
                message: format!("prompt for unknown sample {}", r.sample_id),
            })?;
            jobs.push(ReportJob { sample: (*sample).clone(), phase: r.phase, prompt: r.prompt.clone() });
        }
        let results = generate_all(backend.as_ref(), &jobs, cfg.max_in_flight, &cfg.retry);
        let mut new_reports = Vec::new();
        let mut errors: BTreeMap<(String, PromptKind), String> = BTreeMap::new();
        for (job, res) in jobs.iter().zip(results) {
            let key = (job.prompt.message(), job.prompt.kind);
            match res {
                Ok(rep) => {
                    texts.insert(key, rep.text.clone());
                    new_reports.push(rep);
                }
                Err(e) => {
                    errors.insert(key, e.to_string());
                }
            }
        }
        fresh += new_reports.len();
        append_jsonl(&path, &new_reports)?;

        for r in &records {
            let id = rid(r);
            if let Some(rep) = existing.get(&id) {
                all.push(rep.clone());
                continue;
            }
            let key = (r.prompt.message(), r.prompt.kind);
            match texts.get(&key) {
                Some(text) => all.push(finish_report(&spec.name, r.prompt.kind, r.phase, by_id[r.sample_id.as_str()], text.clone())),
                None => failures.push(ItemFailure { id, error: errors.get(&key).cloned().unwrap_or_default() }),
            }
        }
    }
    // canonical order: backend, then prompt record order
    write_jsonl(&path, &all)?;
    let failures_path = cfg.run_dir.join(GENERATE_FAILURES);
    if !failures.is_empty() {
        write_json(&failures_path, &failures)?;
        return Err(PipelineError::PartialFailure { stage: Stage::Generate, failed: failures.len(), total: all.len() + failures.len() });
    }
    if failures_path.exists() {
        std::fs::remove_file(&failures_path).map_err(|e| PipelineError::Io(e.to_string()))?;
    }
    let over = all.iter().filter(|r| r.over_limit).count();
    Ok(vec![format!("{} reports ({} newly generated, {} over the word limit)", all.len(), fresh, over)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingsMeta {
    backend: String,
    embed_input: EmbedInput,
    seed: u64,
}

fn embedder(cfg: &RunConfig) -> Result<(Box<dyn EmbeddingBackend>, EmbeddingsMeta), PipelineError> {
    let (backend, name): (Box<dyn EmbeddingBackend>, String) = match (&cfg.embedder, cfg.mock_mode) {
        (_, true) => (Box::new(MockEmbedder::new(cfg.base_seed, MockEmbedder::DEFAULT_DIM)), "mock-embedder".into()),
        (Some(spec), false) => {
            (Box::new(WireEmbedder(ChatClient::from_spec(spec).map_err(|e| fail(Stage::Select)(&e))?)), spec.name.clone())
        }
        (None, false) => return Err(PipelineError::Config { field: "embedder".into(), message: "missing".into() }),
    };
    let seed = if cfg.mock_mode { cfg.base_seed } else { 0 };
    Ok((backend, EmbeddingsMeta { backend: name, embed_input: cfg.embed_input, seed }))
}

fn embedding_texts(cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<(String, String)>, PipelineError> {
    match cfg.embed_input {
        EmbedInput::Sample => Ok(samples.iter().map(|s| (s.sample_id.clone(), s.code())).collect()),
        EmbedInput::Report => {
            let reports: Vec<Report> = read_jsonl(&input(cfg, Stage::Select, REPORTS)?)?;
            let filter = cfg.effective_filter();
            let (backend, kind) = (&filter.backends[0], filter.prompt_kinds[0]);
            samples
                .iter()
                .map(|s| {
                    let id = report_id(&s.sample_id, backend, kind, Phase::Evaluation);
                    reports
                        .iter()
                        .find(|r| r.report_id == id)
                        .map(|r| (s.sample_id.clone(), r.text.clone()))
                        .ok_or_else(|| PipelineError::MissingStageInput { stage: Stage::Select, artifact: format!("{REPORTS} entry {id}") })
                })
                .collect()
        }
    }
}

fn select(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let samples: Vec<Sample> = read_jsonl(&input(cfg, Stage::Select, SAMPLES)?)?;
    let (backend, meta) = embedder(cfg)?;
    let meta_path = cfg.run_dir.join(EMBEDDINGS_META);
    let emb_path = cfg.run_dir.join(EMBEDDINGS);
    let cached: BTreeMap<String, EmbeddingVector> = match read_json::<EmbeddingsMeta>(&meta_path) {
        Ok(m) if m == meta && emb_path.exists() => {
            read_jsonl::<EmbeddingVector>(&emb_path)?.into_iter().map(|v| (v.source_id().to_string(), v)).collect()
        }
        _ => BTreeMap::new(),
    };
    let texts = embedding_texts(cfg, &samples)?;
    let missing: Vec<&(String, String)> = texts.iter().filter(|(id, _)| !cached.contains_key(id)).collect();
    let fresh = par::bounded(&missing, cfg.max_in_flight, |_, (id, text)| embed(backend.as_ref(), id, text));
    let mut vectors = cached;
    for r in fresh {
        let v = r.map_err(|e| fail(Stage::Select)(&e))?;
        vectors.insert(v.source_id().to_string(), v);
    }
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let ordered: Vec<&EmbeddingVector> = ids.iter().map(|id| &vectors[id]).collect();
    write_jsonl(&emb_path, &ordered)?;
    write_json(&meta_path, &meta)?;

    let rounds = if cfg.pair_lock {
        let groups = samples.iter().map(|s| (s.sample_id.clone(), s.cve_id.clone())).collect();
        make_grouped_rounds(&ids, &groups, &vectors, cfg.k_rounds, cfg.p, cfg.base_seed, Exec::Parallel)
    } else {
        make_rounds(&ids, &vectors, cfg.k_rounds, cfg.p, cfg.base_seed, Exec::Parallel)
    }
    .map_err(|e| fail(Stage::Select)(&e))?;
    write_json(&cfg.run_dir.join(ROUNDS), &rounds)?;

    let built: BTreeSet<&str> = samples.iter().map(|s| s.cve_id.as_str()).collect();
    let entries: Vec<CveEntry> = {
        let mut seen = BTreeSet::new();
        samples
            .iter()
            .filter(|s| seen.insert(s.cve_id.clone()))
            .map(|s| CveEntry {
                cve_id: s.cve_id.clone(),
                cwe_id: s.cwe_id.clone(),
                program: String::new(),
                version_note: String::new(),
                patch_url: String::new(),
            })
            .collect()
    };
    let partition = partition_unseen_cwe(&entries);
    write_json(&cfg.run_dir.join(PARTITION), &partition)?;
    Ok(vec![format!(
        "{} rounds over {} samples from {} records: {} selected / {} held out each",
        rounds.len(),
        ids.len(),
        built.len(),
        rounds[0].selected_ids.len(),
        rounds[0].held_out_ids.len()
    )])
}

fn truth_of(samples: &[Sample]) -> BTreeMap<String, Label> {
    samples.iter().map(|s| (s.sample_id.clone(), Label::from_kind(s.kind))).collect()
}

fn export_train(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let rounds: Vec<SplitRound> = read_json(&input(cfg, Stage::ExportTrain, ROUNDS)?)?;
    let reports: Vec<Report> = read_jsonl(&input(cfg, Stage::ExportTrain, REPORTS)?)?;
    let samples: Vec<Sample> = read_jsonl(&input(cfg, Stage::ExportTrain, SAMPLES)?)?;
    let truth = truth_of(&samples);
    let filter = cfg.effective_filter();
    let mut lines = Vec::new();
    for r in &rounds {
        let ex = export_training_set(&reports, r, &filter, &truth).map_err(|e| fail(Stage::ExportTrain)(&e))?;
        write_round_export(&round_dir(&cfg.run_dir, r.round_index), &ex).map_err(|e| fail(Stage::ExportTrain)(&e))?;
        lines.push(format!("round {}: {} train / {} eval records", r.round_index, ex.train.len(), ex.eval.len()));
    }
    emit_train_config(&cfg.run_dir.join(TRAIN_CONFIG), &cfg.train_overrides).map_err(|e| fail(Stage::ExportTrain)(&e))?;
    Ok(lines)
}

fn round_dir(run_dir: &Path, i: usize) -> PathBuf {
    run_dir.join(format!("round-{i}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub round_index: usize,
    pub generator: String,
    pub prompt_kind: PromptKind,
    pub classification: Classification,
}

fn classifier(cfg: &RunConfig, round: usize) -> Result<Box<dyn ClassifierBackend>, PipelineError> {
    if cfg.mock_mode {
        return Ok(Box::new(KeywordClassifier::default()));
    }
    let mut spec = cfg.classifier.clone().ok_or_else(|| PipelineError::Config { field: "classifier".into(), message: "missing".into() })?;
    spec.model_id = spec.model_id.replace("{round}", &round.to_string());
    Ok(Box::new(WireClassifier(ChatClient::from_spec(&spec).map_err(|e| fail(Stage::Classify)(&e))?)))
}

fn classify(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let rounds: Vec<SplitRound> = read_json(&input(cfg, Stage::Classify, ROUNDS)?)?;
    let reports: Vec<Report> = read_jsonl(&input(cfg, Stage::Classify, REPORTS)?)?;
    let index: BTreeMap<&str, &Report> = reports.iter().map(|r| (r.report_id.as_str(), r)).collect();
    let filter = cfg.effective_filter();
    let mut records = Vec::new();
    let mut failed = 0;
    let mut total = 0;
    for round in &rounds {
        let mut batch: Vec<Report> = Vec::new();
        for id in &round.held_out_ids {
            for b in &filter.backends {
                for &k in &filter.prompt_kinds {
                    let rid = report_id(id, b, k, Phase::Evaluation);
                    let r = index.get(rid.as_str()).ok_or_else(|| PipelineError::MissingStageInput {
                        stage: Stage::Classify,
                        artifact: format!("{REPORTS} entry {rid}"),
                    })?;
                    batch.push((*r).clone());
                }
            }
        }
        let backend = classifier(cfg, round.round_index)?;
        let results = classify_all(backend.as_ref(), &batch, cfg.max_in_flight, &cfg.retry);
        total += batch.len();
        for (rep, res) in batch.iter().zip(results) {
            match res {
                Ok(c) => records.push(ClassificationRecord {
                    round_index: round.round_index,
                    generator: rep.backend_name.clone(),
                    prompt_kind: rep.prompt_kind,
                    classification: c,
                }),
                Err(e) => {
                    log::warn!("{}: {e}", rep.report_id);
                    failed += 1;
                }
            }
        }
    }
    write_jsonl(&cfg.run_dir.join(CLASSIFICATIONS), &records)?;
    if failed > 0 {
        return Err(PipelineError::PartialFailure { stage: Stage::Classify, failed, total });
    }
    Ok(vec![format!("{} classifications over {} rounds", records.len(), rounds.len())])
}

#[derive(Debug, Serialize)]
struct RoundResult {
    round_index: usize,
    confusion: ConfusionMatrix,
    metrics: MetricsBundle,
    breakdown: Breakdown,
}

#[derive(Debug, Serialize)]
struct GroupResult {
    model: String,
    prompt: PromptKind,
    aggregate: crate::metrics::AggregateMetrics,
    rounds: Vec<RoundResult>,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    partition: CwePartition,
    groups: Vec<GroupResult>,
}

fn evaluate(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let records: Vec<ClassificationRecord> = read_jsonl(&input(cfg, Stage::Evaluate, CLASSIFICATIONS)?)?;
    let samples: Vec<Sample> = read_jsonl(&input(cfg, Stage::Evaluate, SAMPLES)?)?;
    let partition: CwePartition = read_json(&input(cfg, Stage::Evaluate, PARTITION)?)?;
    let rounds: Vec<SplitRound> = read_json(&input(cfg, Stage::Evaluate, ROUNDS)?)?;
    let truth = truth_of(&samples);
    let cwe_map: BTreeMap<String, String> = samples.iter().map(|s| (s.sample_id.clone(), s.cwe_id.clone())).collect();
    let err = fail(Stage::Evaluate);

    let mut groups: BTreeMap<(String, PromptKind), BTreeMap<usize, Vec<Classification>>> = BTreeMap::new();
    for r in records {
        groups.entry((r.generator, r.prompt_kind)).or_default().entry(r.round_index).or_default().push(r.classification);
    }
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for ((model, prompt), by_round) in groups {
        let mut results = Vec::new();
        for round in &rounds {
            let cls = by_round.get(&round.round_index).map(Vec::as_slice).unwrap_or(&[]);
            let cm = confusion(cls, &truth).map_err(|e| err(&e))?;
            let m = metrics(&cm).map_err(|e| err(&format!("{model}/{} round {}: {e}", prompt.code(), round.round_index)))?;
            let b = breakdown(cls, &truth, &cwe_map, &partition).map_err(|e| err(&e))?;
            results.push(RoundResult { round_index: round.round_index, confusion: cm, metrics: m, breakdown: b });
        }
        let bundles: Vec<MetricsBundle> = results.iter().map(|r| r.metrics.clone()).collect();
        let aggregate = aggregate_rounds(&bundles).map_err(|e| err(&e))?;
        let acc = &aggregate[&crate::metrics::Metric::Accuracy];
        lines.push(format!("{model} / {prompt}: accuracy {:.3} (+{:.3}/-{:.3})", acc.gmean, acc.max_up, acc.max_down));
        rows.push(SummaryRow { model: model.clone(), prompt: prompt.to_string(), aggregate: aggregate.clone() });
        out.push(GroupResult { model, prompt, aggregate, rounds: results });
    }
    if out.is_empty() {
        return Err(PipelineError::Stage { stage: Stage::Evaluate, message: "no classifications to evaluate".into() });
    }

    let mut md = String::from("# Classification results\n\nGeometric mean over rounds, with maximum upward and downward deviation, in percent.\n\n");
    md.push_str(&markdown_table(&rows));
    md.push_str("\n## Unseen CWEs\n\n| Model | Prompt | Round | Predictable | Evaluated | Accuracy |\n|---|---|---|---|---|---|\n");
    for g in &out {
        for r in &g.rounds {
            let n = r.breakdown.unseen.len();
            let ok = r.breakdown.unseen.iter().filter(|u| u.predictable).count();
            let acc = r.breakdown.unseen_accuracy.map(|a| format!("{:.1}", a * 100.0)).unwrap_or_else(|| "-".into());
            md.push_str(&format!("| {} | {} | {} | {ok} | {n} | {acc} |\n", g.model, g.prompt, r.round_index));
        }
    }
    write_json(&cfg.run_dir.join(METRICS_JSON), &MetricsReport { partition, groups: out })?;
    write_atomic(&cfg.run_dir.join(METRICS_MD), md.as_bytes())?;
    Ok(lines)
}
