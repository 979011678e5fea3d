//! CVE corpus ingestion: manifest, patches, function extraction, samples.

pub mod census;
pub mod cwe;
pub mod diff;
pub mod extract;
pub mod fetch;
pub mod manifest;
pub mod samples;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use census::{census, DatasetStats};
pub use cwe::{categorize_cwe, CweCategory};
pub use diff::{apply_hunks, parse_unified_diff, reverse_hunks, FilePatch, Hunk, HunkLine, LineMarker, PatchDocument};
pub use extract::{extract_functions, FunctionSpan};
pub use fetch::{fetch_all, fetch_patch, FetchResponse, HttpFetcher, MapFetcher, PatchCache, PatchFetcher};
pub use manifest::{parse_manifest, CveEntry};
pub use samples::{build_samples, sample_id, Sample, SampleKind, SamplePair, SampleWarning};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("manifest is missing the header row `cve_id,cwe_id,program,version_note,patch_url`")]
    MissingHeader,
    #[error("manifest line {line_no}: wrong number of columns")]
    MalformedRow { line_no: usize },
    #[error("manifest line {line_no}: invalid CVE id, CWE id or patch URL")]
    InvalidId { line_no: usize },
    #[error("duplicate manifest entry for {0}")]
    DuplicateCve(String),
    #[error("fetching {url} failed{}: {message}", status.map(|s| format!(" with status {s}")).unwrap_or_default())]
    FetchFailed { url: String, status: Option<u16>, message: String },
    #[error("empty patch body from {0}")]
    EmptyPatch(String),
    #[error("patch contains no hunks")]
    NoHunks,
    #[error("hunk header at line {line_no} appears before any file header")]
    HunkOutsideFile { line_no: usize },
    #[error("{file}: hunk {hunk_index} line counts disagree with its header")]
    CountMismatch { file: String, hunk_index: usize },
    #[error("{file}:{line}: function body never closes")]
    UnbalancedBraces { file: String, line: usize },
    #[error("{file}: hunk {hunk} does not match the pre-image source")]
    HunkAnchorMismatch { file: String, hunk: usize },
    #[error("{0}: no touched function or reconstructable region")]
    NoTouchedFunction(String),
    #[error("unknown CWE id {0}")]
    UnknownCwe(String),
    #[error("{0}")]
    Io(String),
}

/// Reads `<corpus_dir>/descriptions.json` (CVE id to description text).
/// A missing file yields an empty map.
pub fn load_descriptions(corpus_dir: &Path) -> Result<BTreeMap<String, String>, CorpusError> {
    let path = corpus_dir.join("descriptions.json");
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(CorpusError::Io(format!("{}: {e}", path.display()))),
    }
}

/// Pre-image sources for the files a patch touches, looked up under
/// `<corpus_dir>/sources/<cve_id>/<path>`. Files without a cached source are
/// left out, which sends them down the hunk-only reconstruction path.
pub fn load_pre_sources(corpus_dir: &Path, patch: &PatchDocument) -> BTreeMap<String, String> {
    let root = corpus_dir.join("sources").join(&patch.cve_id);
    patch
        .files
        .iter()
        .filter_map(|f| {
            let text = fs::read_to_string(root.join(&f.path)).ok()?;
            Some((f.path.clone(), text.replace("\r\n", "\n")))
        })
        .collect()
}
