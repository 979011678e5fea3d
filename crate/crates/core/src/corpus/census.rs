use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::manifest::CveEntry;
use super::samples::{Sample, SampleKind};

/// Corpus size figures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_records: usize,
    /// Two per record: one vulnerable and one fixed.
    pub n_samples: usize,
    pub n_functions: usize,
    pub n_loc: usize,
    pub n_cwes: usize,
    pub n_programs: usize,
    pub per_cwe_counts: BTreeMap<String, usize>,
    /// Number of records that have a built vulnerable sample.
    pub samples_built: usize,
    /// True when every record has a vulnerable sample made only of whole
    /// functions, so `n_functions` and `n_loc` describe the full corpus.
    pub functions_complete: bool,
}

pub fn census(samples: &[Sample], entries: &[CveEntry]) -> DatasetStats {
    let mut per_cwe_counts = BTreeMap::new();
    for e in entries {
        *per_cwe_counts.entry(e.cwe_id.clone()).or_insert(0) += 1;
    }
    let programs: BTreeSet<&str> = entries.iter().map(|e| e.program.as_str()).collect();
    let known: BTreeSet<&str> = entries.iter().map(|e| e.cve_id.as_str()).collect();

    let vulnerable: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.kind == SampleKind::Vulnerable && known.contains(s.cve_id.as_str()))
        .collect();
    let mut n_functions = 0;
    let mut n_loc = 0;
    let mut whole = 0;
    for s in &vulnerable {
        // distinct within a record; shared functions across records count per record
        let distinct: BTreeSet<(&str, usize)> = s
            .functions
            .iter()
            .filter(|f| !f.region)
            .map(|f| (f.file_path.as_str(), f.start_line))
            .collect();
        n_functions += distinct.len();
        n_loc += s.loc;
        if s.functions.iter().all(|f| !f.region) {
            whole += 1;
        }
    }
    let built: BTreeSet<&str> = vulnerable.iter().map(|s| s.cve_id.as_str()).collect();

    DatasetStats {
        n_records: entries.len(),
        n_samples: 2 * entries.len(),
        n_functions,
        n_loc,
        n_cwes: per_cwe_counts.len(),
        n_programs: programs.len(),
        per_cwe_counts,
        samples_built: built.len(),
        functions_complete: !entries.is_empty() && whole == entries.len() && built.len() == entries.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::extract::FunctionSpan;

    fn entry(cve: &str, cwe: &str, program: &str) -> CveEntry {
        CveEntry {
            cve_id: cve.into(),
            cwe_id: cwe.into(),
            program: program.into(),
            version_note: String::new(),
            patch_url: "https://x.test/p".into(),
        }
    }

    fn span(start: usize, end: usize, region: bool) -> FunctionSpan {
        FunctionSpan {
            file_path: "a.rs".into(),
            name: "f".into(),
            start_line: start,
            end_line: end,
            text: vec!["x"; end + 1 - start].join("\n"),
            region,
        }
    }

    fn sample(cve: &str, kind: SampleKind, functions: Vec<FunctionSpan>) -> Sample {
        Sample {
            sample_id: crate::corpus::samples::sample_id(cve, kind),
            cve_id: cve.into(),
            cwe_id: "CWE-416".into(),
            kind,
            description: String::new(),
            loc: functions.iter().map(FunctionSpan::line_count).sum(),
            functions,
        }
    }

    #[test]
    fn empty_corpus() {
        let s = census(&[], &[]);
        assert_eq!(s, DatasetStats::default());
    }

    #[test]
    fn counts() {
        let entries = vec![
            entry("CVE-2020-0001", "CWE-416", "a"),
            entry("CVE-2020-0002", "CWE-416", "b"),
            entry("CVE-2020-0003", "CWE-400", "a"),
        ];
        let samples = vec![
            sample("CVE-2020-0001", SampleKind::Vulnerable, vec![span(1, 3, false), span(5, 9, false)]),
            sample("CVE-2020-0001", SampleKind::Fixed, vec![span(1, 4, false)]),
            sample("CVE-2020-0002", SampleKind::Vulnerable, vec![span(2, 2, true)]),
        ];
        let s = census(&samples, &entries);
        assert_eq!((s.n_records, s.n_samples, s.n_cwes, s.n_programs), (3, 6, 2, 2));
        assert_eq!(s.per_cwe_counts["CWE-416"], 2);
        assert_eq!(s.per_cwe_counts["CWE-400"], 1);
        assert_eq!(s.n_functions, 2);
        assert_eq!(s.n_loc, 3 + 5 + 1);
        assert_eq!(s.samples_built, 2);
        assert!(!s.functions_complete);
        assert!(s.per_cwe_counts.values().all(|&c| c >= 1));
    }
}
