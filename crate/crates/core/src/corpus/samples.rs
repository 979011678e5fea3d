//! Paired vulnerable/fixed sample construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::diff::{apply_hunks, ApplyError, Hunk, PatchDocument};
use super::extract::{extract_functions, FunctionSpan};
use super::manifest::CveEntry;
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Vulnerable,
    Fixed,
}

impl SampleKind {
    pub fn suffix(self) -> &'static str {
        match self {
            Self::Vulnerable => "vuln",
            Self::Fixed => "fixed",
        }
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vulnerable => "vulnerable",
            Self::Fixed => "fixed",
        })
    }
}

/// One labeled code unit: the functions a patch touches, on one side of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SampleRecord", try_from = "SampleRecord")]
pub struct Sample {
    pub sample_id: String,
    pub cve_id: String,
    pub cwe_id: String,
    pub kind: SampleKind,
    /// CVE description. Empty for fixed samples.
    pub description: String,
    /// Ordered by file path, then start line.
    pub functions: Vec<FunctionSpan>,
    pub loc: usize,
}

pub fn sample_id(cve_id: &str, kind: SampleKind) -> String {
    format!("{cve_id}:{}", kind.suffix())
}

impl Sample {
    /// Code shown to report generators: each file group is introduced by a
    /// one-line provenance comment.
    pub fn text(&self) -> String {
        let mut groups: Vec<String> = Vec::new();
        let mut current: Option<&str> = None;
        let mut bodies: Vec<&str> = Vec::new();
        for f in &self.functions {
            if current != Some(f.file_path.as_str()) {
                if let Some(path) = current {
                    groups.push(format!("// file: {path}\n{}\n", bodies.join("\n\n")));
                }
                current = Some(&f.file_path);
                bodies.clear();
            }
            bodies.push(&f.text);
        }
        if let Some(path) = current {
            groups.push(format!("// file: {path}\n{}\n", bodies.join("\n\n")));
        }
        groups.join("\n")
    }

    /// Concatenated function texts without provenance comments.
    pub fn code(&self) -> String {
        self.functions.iter().map(|f| f.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredFunction {
    name: String,
    start_line: usize,
    end_line: usize,
    text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    region: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredFile {
    path: String,
    functions: Vec<StoredFunction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    cve_id: String,
    cwe_id: String,
    kind: SampleKind,
    description: String,
    files: Vec<StoredFile>,
    loc: usize,
}

impl From<Sample> for SampleRecord {
    fn from(s: Sample) -> Self {
        let mut files: Vec<StoredFile> = Vec::new();
        for f in s.functions {
            let stored = StoredFunction {
                name: f.name,
                start_line: f.start_line,
                end_line: f.end_line,
                text: f.text,
                region: f.region,
            };
            match files.last_mut() {
                Some(last) if last.path == f.file_path => last.functions.push(stored),
                _ => files.push(StoredFile { path: f.file_path, functions: vec![stored] }),
            }
        }
        SampleRecord {
            sample_id: s.sample_id,
            cve_id: s.cve_id,
            cwe_id: s.cwe_id,
            kind: s.kind,
            description: s.description,
            files,
            loc: s.loc,
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = String;

    fn try_from(r: SampleRecord) -> Result<Self, Self::Error> {
        let functions: Vec<FunctionSpan> = r
            .files
            .into_iter()
            .flat_map(|file| {
                file.functions.into_iter().map(move |f| FunctionSpan {
                    file_path: file.path.clone(),
                    name: f.name,
                    start_line: f.start_line,
                    end_line: f.end_line,
                    text: f.text,
                    region: f.region,
                })
            })
            .collect();
        let loc: usize = functions.iter().map(FunctionSpan::line_count).sum();
        if loc != r.loc {
            return Err(format!("{}: loc {} does not match its functions ({loc})", r.sample_id, r.loc));
        }
        if functions.iter().any(|f| f.start_line > f.end_line) {
            return Err(format!("{}: span with start_line after end_line", r.sample_id));
        }
        Ok(Sample {
            sample_id: r.sample_id,
            cve_id: r.cve_id,
            cwe_id: r.cwe_id,
            kind: r.kind,
            description: r.description,
            functions,
            loc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleWarning {
    /// Every hunk is pure context, so both samples carry the same code.
    NoChange { cve_id: String },
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub vulnerable: Sample,
    pub fixed: Sample,
    pub warnings: Vec<SampleWarning>,
}

// Touched line numbers for each side of one file's hunks.
fn touched_lines(hunks: &[Hunk]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut old = BTreeSet::new();
    let mut new = BTreeSet::new();
    for h in hunks {
        if h.is_pure_context() {
            old.extend(h.old_start..h.old_start + h.old_len);
            new.extend(h.new_start..h.new_start + h.new_len);
            continue;
        }
        old.extend(h.removed_old_lines());
        old.extend(h.insertion_anchors_old());
        new.extend(h.added_new_lines());
        new.extend(h.deletion_anchors_new());
    }
    (old, new)
}

fn select(spans: Vec<FunctionSpan>, touched: &BTreeSet<usize>) -> Vec<FunctionSpan> {
    spans
        .into_iter()
        .filter(|s| touched.range(s.start_line..=s.end_line).next().is_some())
        .collect()
}

// One side of a single hunk, rebuilt from its own lines.
fn hunk_side(path: &str, hunk: &Hunk, old_side: bool, touched: &BTreeSet<usize>) -> Result<Vec<FunctionSpan>, CorpusError> {
    let (start, len, text): (usize, usize, Vec<&str>) = if old_side {
        (hunk.old_start, hunk.old_len, hunk.old_lines().collect())
    } else {
        (hunk.new_start, hunk.new_len, hunk.new_lines().collect())
    };
    if len == 0 {
        return Ok(Vec::new());
    }
    let text = text.join("\n");
    // functions wholly inside the hunk are kept as functions; an incomplete
    // body (unbalanced braces) just means the region is not a whole function
    let spans = extract_functions(&text, path).unwrap_or_default();
    let shifted: Vec<FunctionSpan> = spans
        .into_iter()
        .map(|mut s| {
            s.start_line += start - 1;
            s.end_line += start - 1;
            s
        })
        .collect();
    let hunk_touched: BTreeSet<usize> = touched.range(start..start + len).copied().collect();
    let picked = select(shifted, &hunk_touched);
    let covered = hunk_touched.iter().all(|l| picked.iter().any(|s| s.contains_line(*l)));
    if !picked.is_empty() && covered {
        return Ok(picked);
    }
    let name = if hunk.section.is_empty() {
        format!("region@{start}")
    } else {
        format!("region@{start} {}", hunk.section)
    };
    Ok(vec![FunctionSpan {
        file_path: path.to_string(),
        name,
        start_line: start,
        end_line: start + len - 1,
        text,
        region: true,
    }])
}

fn anchor_error(file: &str, e: ApplyError) -> CorpusError {
    let hunk = match e {
        ApplyError::OutOfRange { hunk } | ApplyError::AnchorMismatch { hunk, .. } => hunk,
    };
    CorpusError::HunkAnchorMismatch { file: file.to_string(), hunk }
}

/// Builds the vulnerable and fixed samples for one CVE record.
///
/// When `pre_sources` holds the pre-image of a touched file, functions are
/// extracted from the real file and its patched counterpart. Otherwise the
/// touched region is rebuilt from hunk lines alone. Whole functions are used
/// where the hunk contains them, and the hunk region itself otherwise.
pub fn build_samples(
    entry: &CveEntry,
    patch: &PatchDocument,
    pre_sources: &BTreeMap<String, String>,
    description: &str,
) -> Result<SamplePair, CorpusError> {
    let mut files: Vec<_> = patch.files.iter().collect();
    files.sort_by(|a, b| a.path.cmp(&b.path));

    let mut vuln_fns = Vec::new();
    let mut fixed_fns = Vec::new();
    for file in &files {
        let mut hunks = file.hunks.clone();
        hunks.sort_by_key(|h| h.old_start);
        let (old_touched, new_touched) = touched_lines(&hunks);

        let (mut vuln, mut fixed) = match pre_sources.get(&file.path) {
            Some(pre) => {
                let post = apply_hunks(pre, &hunks, 1).map_err(|e| anchor_error(&file.path, e))?;
                let v = select(extract_functions(pre, &file.path)?, &old_touched);
                let f = select(extract_functions(&post, &file.path)?, &new_touched);
                (v, f)
            }
            None => (Vec::new(), Vec::new()),
        };
        // hunks whose changes were not located inside a function fall back to regions
        for h in &hunks {
            let (ho, hn) = touched_lines(std::slice::from_ref(h));
            if !ho.iter().all(|l| vuln.iter().any(|s: &FunctionSpan| s.contains_line(*l))) {
                for s in hunk_side(&file.path, h, true, &old_touched)? {
                    if !vuln.iter().any(|v: &FunctionSpan| v.end_line >= s.start_line && s.end_line >= v.start_line) {
                        vuln.push(s);
                    }
                }
            }
            if !hn.iter().all(|l| fixed.iter().any(|s: &FunctionSpan| s.contains_line(*l))) {
                for s in hunk_side(&file.path, h, false, &new_touched)? {
                    if !fixed.iter().any(|v: &FunctionSpan| v.end_line >= s.start_line && s.end_line >= v.start_line) {
                        fixed.push(s);
                    }
                }
            }
        }
        if vuln.is_empty() && fixed.is_empty() {
            return Err(CorpusError::NoTouchedFunction(file.path.clone()));
        }
        vuln.sort_by_key(|s| s.start_line);
        fixed.sort_by_key(|s| s.start_line);
        vuln_fns.extend(vuln);
        fixed_fns.extend(fixed);
    }
    if vuln_fns.is_empty() || fixed_fns.is_empty() {
        let path = files.first().map(|f| f.path.clone()).unwrap_or_default();
        return Err(CorpusError::NoTouchedFunction(path));
    }

    let make = |kind: SampleKind, functions: Vec<FunctionSpan>| Sample {
        sample_id: sample_id(&entry.cve_id, kind),
        cve_id: entry.cve_id.clone(),
        cwe_id: entry.cwe_id.clone(),
        kind,
        description: if kind == SampleKind::Vulnerable { description.to_string() } else { String::new() },
        loc: functions.iter().map(FunctionSpan::line_count).sum(),
        functions,
    };
    let mut warnings = Vec::new();
    if files.iter().all(|f| f.hunks.iter().all(Hunk::is_pure_context)) {
        log::warn!("{}: patch changes nothing", entry.cve_id);
        warnings.push(SampleWarning::NoChange { cve_id: entry.cve_id.clone() });
    }
    Ok(SamplePair {
        vulnerable: make(SampleKind::Vulnerable, vuln_fns),
        fixed: make(SampleKind::Fixed, fixed_fns),
        warnings,
    })
}

/// Applies the hunks of `patch` that fall entirely inside `span` (a
/// vulnerable-side span) to its text. Returns `None` when no hunk lies inside.
pub fn apply_within_span(span: &FunctionSpan, patch: &PatchDocument) -> Option<Result<String, ApplyError>> {
    let hunks: Vec<Hunk> = patch
        .files
        .iter()
        .filter(|f| f.path == span.file_path)
        .flat_map(|f| f.hunks.iter())
        .filter(|h| h.old_start >= span.start_line && h.old_start + h.old_len <= span.end_line + 1)
        .cloned()
        .collect();
    if hunks.is_empty() {
        return None;
    }
    Some(apply_hunks(&span.text, &hunks, span.start_line))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::diff::{parse_unified_diff, reverse_hunks};

    const LISTING: &str = include_str!("../../data/patches/CVE-2018-1000657.patch");
    const RESERVE: &str = include_str!("../../data/sources/CVE-2018-1000657/reserve_excerpt.rs");

    fn entry(cve: &str) -> CveEntry {
        CveEntry {
            cve_id: cve.into(),
            cwe_id: "CWE-119".into(),
            program: "standard library in rust".into(),
            version_note: "before 1.22.0".into(),
            patch_url: "https://example.test/p".into(),
        }
    }

    // the excerpt begins 554 lines into the real file (hunk at 558 is its fifth line)
    fn padded_reserve() -> String {
        let mut s = "// elided\n".repeat(553);
        s.push_str(RESERVE);
        s
    }

    #[test]
    fn listing_full_source_mode() {
        let patch = parse_unified_diff("CVE-2018-1000657", LISTING).unwrap();
        let sources = BTreeMap::from([("src/liballoc/vec_deque.rs".to_string(), padded_reserve())]);
        let pair = build_samples(&entry("CVE-2018-1000657"), &patch, &sources, "desc").unwrap();
        let (v, f) = (&pair.vulnerable, &pair.fixed);
        assert_eq!(v.sample_id, "CVE-2018-1000657:vuln");
        assert_eq!(f.sample_id, "CVE-2018-1000657:fixed");
        assert_eq!(v.functions.len(), 1);
        assert_eq!(v.functions[0].name, "reserve");
        assert_eq!((v.functions[0].start_line, v.functions[0].end_line), (554, 567));
        assert_eq!(v.loc, 14);
        assert!(v.text().contains("new_cap > self.capacity()"));
        assert!(f.text().contains("new_cap > old_cap"));
        assert!(!f.text().contains("new_cap > self.capacity()"));
        assert!(v.text().starts_with("// file: src/liballoc/vec_deque.rs\n"));
        assert_eq!(v.description, "desc");
        assert_eq!(f.description, "");

        let applied = apply_within_span(&v.functions[0], &patch).unwrap().unwrap();
        assert_eq!(applied, f.functions[0].text);
        let hunks = &patch.files[0].hunks;
        assert_eq!(reverse_hunks(&f.functions[0].text, hunks, f.functions[0].start_line).unwrap(), v.functions[0].text);
    }

    #[test]
    fn listing_fallback_mode() {
        let patch = parse_unified_diff("CVE-2018-1000657", LISTING).unwrap();
        let pair = build_samples(&entry("CVE-2018-1000657"), &patch, &BTreeMap::new(), "desc").unwrap();
        let (v, f) = (&pair.vulnerable, &pair.fixed);
        assert_eq!(v.functions.len(), 1);
        assert!(v.functions[0].region);
        assert_eq!((v.functions[0].start_line, v.functions[0].end_line), (558, 564));
        assert!(v.text().contains("new_cap > self.capacity()"));
        assert!(f.text().contains("new_cap > old_cap"));
        let applied = apply_within_span(&v.functions[0], &patch).unwrap().unwrap();
        assert_eq!(applied, f.functions[0].text);
    }

    #[test]
    fn identity_patch_warns() {
        let raw = "--- a/a.rs\n+++ b/a.rs\n@@ -1,3 +1,3 @@\n fn a() {\n     1\n }\n";
        let patch = parse_unified_diff("CVE-2020-0001", raw).unwrap();
        let pair = build_samples(&entry("CVE-2020-0001"), &patch, &BTreeMap::new(), "d").unwrap();
        assert_eq!(pair.vulnerable.text(), pair.fixed.text());
        assert_eq!(pair.warnings, vec![SampleWarning::NoChange { cve_id: "CVE-2020-0001".into() }]);
        // a hunk containing a whole function yields the function, not a region
        assert!(!pair.vulnerable.functions[0].region);
        assert_eq!(pair.vulnerable.functions[0].name, "a");
    }

    const TWO_FN_PRE: &str = "\
use std::io;

fn parse(buf: &[u8]) -> usize {
    let n = buf[0] as usize;
    n
}

const MAX: usize = 8;

fn write(out: &mut Vec<u8>, n: usize) {
    out.push(n as u8);
}
";

    const TWO_FN_PATCH: &str = "\
--- a/src/codec.rs
+++ b/src/codec.rs
@@ -3,4 +3,4 @@ use std::io;
 fn parse(buf: &[u8]) -> usize {
-    let n = buf[0] as usize;
+    let n = *buf.first().unwrap_or(&0) as usize;
     n
 }
@@ -10,3 +10,4 @@ const MAX: usize = 8;
 fn write(out: &mut Vec<u8>, n: usize) {
+    assert!(n <= MAX);
     out.push(n as u8);
 }
";

    #[test]
    fn two_function_patch() {
        let patch = parse_unified_diff("CVE-2021-0002", TWO_FN_PATCH).unwrap();
        let sources = BTreeMap::from([("src/codec.rs".to_string(), TWO_FN_PRE.to_string())]);
        let full = build_samples(&entry("CVE-2021-0002"), &patch, &sources, "d").unwrap();
        let fallback = build_samples(&entry("CVE-2021-0002"), &patch, &BTreeMap::new(), "d").unwrap();

        // manual extraction: parse at lines 3-6, write at 10-12 (13 after the fix)
        for pair in [&full, &fallback] {
            let v: Vec<_> = pair.vulnerable.functions.iter().map(|s| (s.name.as_str(), s.start_line, s.end_line)).collect();
            let f: Vec<_> = pair.fixed.functions.iter().map(|s| (s.name.as_str(), s.start_line, s.end_line)).collect();
            assert_eq!(v, [("parse", 3, 6), ("write", 10, 12)]);
            assert_eq!(f, [("parse", 3, 6), ("write", 10, 13)]);
            assert_eq!(pair.vulnerable.loc, 7);
            assert_eq!(pair.fixed.loc, 8);
            assert!(!pair.vulnerable.text().contains("MAX: usize"));
            for (vs, fs) in pair.vulnerable.functions.iter().zip(&pair.fixed.functions) {
                assert_eq!(apply_within_span(vs, &patch).unwrap().unwrap(), fs.text);
            }
        }
    }

    #[test]
    fn multi_file_order_and_provenance() {
        let raw = "\
--- a/src/z.rs
+++ b/src/z.rs
@@ -1,3 +1,3 @@
 fn z() {
-    old();
+    new();
 }
--- a/src/a.rs
+++ b/src/a.rs
@@ -1,3 +1,3 @@
 fn a() {
-    old();
+    new();
 }
";
        let patch = parse_unified_diff("CVE-2021-0003", raw).unwrap();
        let pair = build_samples(&entry("CVE-2021-0003"), &patch, &BTreeMap::new(), "d").unwrap();
        let text = pair.vulnerable.text();
        assert_eq!(text, "// file: src/a.rs\nfn a() {\n    old();\n}\n\n// file: src/z.rs\nfn z() {\n    old();\n}\n");
    }

    #[test]
    fn anchor_mismatch() {
        let patch = parse_unified_diff("CVE-2018-1000657", LISTING).unwrap();
        let sources = BTreeMap::from([("src/liballoc/vec_deque.rs".to_string(), RESERVE.to_string())]);
        assert!(matches!(
            build_samples(&entry("CVE-2018-1000657"), &patch, &sources, "d"),
            Err(CorpusError::HunkAnchorMismatch { hunk: 0, .. })
        ));
    }

    #[test]
    fn new_file_only_patch_has_no_vulnerable_side() {
        let raw = "--- /dev/null\n+++ b/n.rs\n@@ -0,0 +1,2 @@\n+fn n() {\n+}\n";
        let patch = parse_unified_diff("CVE-2021-0004", raw).unwrap();
        assert!(matches!(
            build_samples(&entry("CVE-2021-0004"), &patch, &BTreeMap::new(), "d"),
            Err(CorpusError::NoTouchedFunction(p)) if p == "n.rs"
        ));
    }

    #[test]
    fn store_schema_round_trip() {
        let patch = parse_unified_diff("CVE-2021-0002", TWO_FN_PATCH).unwrap();
        let pair = build_samples(&entry("CVE-2021-0002"), &patch, &BTreeMap::new(), "d").unwrap();
        let json = serde_json::to_value(&pair.vulnerable).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["cve_id", "cwe_id", "description", "files", "kind", "loc", "sample_id"]);
        assert_eq!(json["kind"], "vulnerable");
        assert_eq!(json["files"][0]["path"], "src/codec.rs");
        let f0 = json["files"][0]["functions"][0].as_object().unwrap();
        let mut fkeys: Vec<_> = f0.keys().cloned().collect();
        fkeys.sort();
        assert_eq!(fkeys, ["end_line", "name", "start_line", "text"]);
        let back: Sample = serde_json::from_value(json).unwrap();
        assert_eq!(back, pair.vulnerable);
    }
}
