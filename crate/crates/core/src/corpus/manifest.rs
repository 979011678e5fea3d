//! CVE manifest parsing.
//!
//! The manifest is a comma-delimited document with a mandatory header row:
//! `cve_id,cwe_id,program,version_note,patch_url`. Fields containing commas
//! are wrapped in double quotes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const MANIFEST_HEADER: [&str; 5] = ["cve_id", "cwe_id", "program", "version_note", "patch_url"];

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveEntry {
    pub cve_id: String,
    pub cwe_id: String,
    pub program: String,
    pub version_note: String,
    pub patch_url: String,
}

impl CveEntry {
    /// Checks the id patterns and URL shape. `line_no` is only used for the error.
    pub fn validate(&self, line_no: usize) -> Result<(), CorpusError> {
        if !is_cve_id(&self.cve_id) || !is_cwe_id(&self.cwe_id) || !is_absolute_url(&self.patch_url) {
            return Err(CorpusError::InvalidId { line_no });
        }
        Ok(())
    }
}

/// `CVE-` + 4-digit year + `-` + at least four digits.
pub fn is_cve_id(s: &str) -> bool {
    let Some(rest) = s.strip_prefix("CVE-") else {
        return false;
    };
    let Some((year, seq)) = rest.split_once('-') else {
        return false;
    };
    year.len() == 4
        && year.bytes().all(|b| b.is_ascii_digit())
        && seq.len() >= 4
        && seq.bytes().all(|b| b.is_ascii_digit())
}

/// `CWE-` + one or more digits.
pub fn is_cwe_id(s: &str) -> bool {
    s.strip_prefix("CWE-")
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

fn is_absolute_url(s: &str) -> bool {
    match s.split_once("://") {
        Some((scheme, rest)) => {
            !scheme.is_empty()
                && scheme.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'+' || b == b'-' || b == b'.')
                && !rest.is_empty()
        }
        None => false,
    }
}

/// Parses manifest text into entries, preserving row order.
///
/// Line numbers in errors are 1-based and count the header as line 1.
pub fn parse_manifest(text: &str) -> Result<Vec<CveEntry>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut records = reader.records();
    match records.next() {
        None => return Err(CorpusError::MissingHeader),
        Some(header) => {
            let header = header.map_err(|_| CorpusError::MalformedRow { line_no: 1 })?;
            let fields: Vec<&str> = header.iter().map(str::trim).collect();
            if fields != MANIFEST_HEADER {
                return Err(CorpusError::MissingHeader);
            }
        }
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in records {
        let record = record.map_err(|e| CorpusError::MalformedRow {
            line_no: e.position().map_or(0, |p| p.line() as usize),
        })?;
        let line_no = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != MANIFEST_HEADER.len() {
            return Err(CorpusError::MalformedRow { line_no });
        }
        let field = |i: usize| record.get(i).unwrap_or_default().trim().to_string();
        let entry = CveEntry {
            cve_id: field(0),
            cwe_id: field(1),
            program: field(2),
            version_note: field(3),
            patch_url: field(4),
        };
        entry.validate(line_no)?;
        if !seen.insert(entry.cve_id.clone()) {
            return Err(CorpusError::DuplicateCve(entry.cve_id));
        }
        entries.push(entry);
    }
    Ok(entries)
}
