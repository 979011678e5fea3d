//! Unified diff parsing and hunk application.
//!
//! Only the parts of a patch that matter for sample construction are kept:
//! file paths and hunks. Commit metadata, mail headers and any prose before
//! the first file section are skipped.

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineMarker {
    Context,
    Removed,
    Added,
}

impl LineMarker {
    fn decode(b: u8) -> Option<Self> {
        match b {
            b' ' => Some(Self::Context),
            b'-' => Some(Self::Removed),
            b'+' => Some(Self::Added),
            _ => None,
        }
    }

    pub fn prefix(self) -> char {
        match self {
            Self::Context => ' ',
            Self::Removed => '-',
            Self::Added => '+',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HunkLine {
    pub marker: LineMarker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    /// Text after the second `@@`, usually the enclosing item.
    pub section: String,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    fn count(&self, marker: LineMarker) -> usize {
        self.lines.iter().filter(|l| l.marker == marker).count()
    }

    pub fn removed_count(&self) -> usize {
        self.count(LineMarker::Removed)
    }

    pub fn added_count(&self) -> usize {
        self.count(LineMarker::Added)
    }

    /// True when stated lengths agree with the marker counts.
    pub fn is_consistent(&self) -> bool {
        let ctx = self.count(LineMarker::Context);
        ctx + self.removed_count() == self.old_len && ctx + self.added_count() == self.new_len
    }

    pub fn is_pure_context(&self) -> bool {
        self.lines.iter().all(|l| l.marker == LineMarker::Context)
    }

    /// Lines as they read before the patch.
    pub fn old_lines(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.marker != LineMarker::Added)
            .map(|l| l.text.as_str())
    }

    /// Lines as they read after the patch.
    pub fn new_lines(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.marker != LineMarker::Removed)
            .map(|l| l.text.as_str())
    }

    /// The same hunk with the roles of the two sides exchanged.
    pub fn reversed(&self) -> Hunk {
        Hunk {
            old_start: self.new_start,
            old_len: self.new_len,
            new_start: self.old_start,
            new_len: self.old_len,
            section: self.section.clone(),
            lines: self
                .lines
                .iter()
                .map(|l| HunkLine {
                    marker: match l.marker {
                        LineMarker::Removed => LineMarker::Added,
                        LineMarker::Added => LineMarker::Removed,
                        LineMarker::Context => LineMarker::Context,
                    },
                    text: l.text.clone(),
                })
                .collect(),
        }
    }

    /// 1-based old-side line numbers of removed lines.
    pub fn removed_old_lines(&self) -> Vec<usize> {
        self.side_positions(LineMarker::Removed, true)
    }

    /// 1-based new-side line numbers of added lines.
    pub fn added_new_lines(&self) -> Vec<usize> {
        self.side_positions(LineMarker::Added, false)
    }

    fn side_positions(&self, wanted: LineMarker, old_side: bool) -> Vec<usize> {
        let skip = if old_side { LineMarker::Added } else { LineMarker::Removed };
        let mut line = if old_side { self.old_start } else { self.new_start };
        let mut out = Vec::new();
        for l in &self.lines {
            if l.marker == skip {
                continue;
            }
            if l.marker == wanted {
                out.push(line);
            }
            line += 1;
        }
        out
    }

    /// Old-side line adjacent to each insertion point of a removal-free run of
    /// additions. Used to locate pure additions in the pre-image.
    pub fn insertion_anchors_old(&self) -> Vec<usize> {
        anchors(&self.lines, self.old_start, LineMarker::Added, LineMarker::Removed)
    }

    /// New-side counterpart of [`Hunk::insertion_anchors_old`] for pure removals.
    pub fn deletion_anchors_new(&self) -> Vec<usize> {
        anchors(&self.lines, self.new_start, LineMarker::Removed, LineMarker::Added)
    }
}

// For every maximal run of `change` lines not accompanied by `other` lines,
// report the surviving-side line just before the run (or just after when the
// run opens the hunk).
fn anchors(lines: &[HunkLine], start: usize, change: LineMarker, other: LineMarker) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = start;
    let mut i = 0;
    while i < lines.len() {
        if lines[i].marker == LineMarker::Context {
            pos += 1;
            i += 1;
            continue;
        }
        let mut j = i;
        while j < lines.len() && lines[j].marker != LineMarker::Context {
            j += 1;
        }
        let run = &lines[i..j];
        let has_other = run.iter().any(|l| l.marker == other);
        if !has_other && run.iter().any(|l| l.marker == change) {
            out.push(if pos > start { pos - 1 } else { pos.max(1) });
        }
        pos += run.iter().filter(|l| l.marker == other).count();
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePatch {
    pub path: String,
    pub hunks: Vec<Hunk>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDocument {
    pub cve_id: String,
    pub files: Vec<FilePatch>,
    pub raw_text: String,
}

fn parse_header(line: &str) -> Option<(usize, usize, usize, usize, String)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, section) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let range = |r: &str| -> Option<(usize, usize)> {
        match r.split_once(',') {
            Some((s, l)) => Some((s.parse().ok()?, l.parse().ok()?)),
            None => Some((r.parse().ok()?, 1)),
        }
    };
    let (old_start, old_len) = range(old)?;
    let (new_start, new_len) = range(new)?;
    Some((old_start, old_len, new_start, new_len, section.trim_start().to_string()))
}

fn strip_side(path: &str, side: char) -> &str {
    let path = path.split('\t').next().unwrap_or(path).trim_end();
    match path.strip_prefix(side).and_then(|p| p.strip_prefix('/')) {
        Some(p) => p,
        None => path,
    }
}

/// Parses a unified diff into per-file hunks.
pub fn parse_unified_diff(cve_id: &str, raw: &str) -> Result<PatchDocument, CorpusError> {
    let normalized = raw.replace("\r\n", "\n");
    let lines: Vec<&str> = normalized.split('\n').collect();
    let mut files: Vec<FilePatch> = Vec::new();
    let mut i = 0;

    while i < lines.len() {
        let line = lines[i];
        if let Some(rest) = line.strip_prefix("diff --git ") {
            // provisional path from the git header, refined by +++/---
            let path = rest.rsplit_once(" b/").map(|(_, b)| b.to_string()).unwrap_or_default();
            files.push(FilePatch { path, hunks: Vec::new() });
            i += 1;
        } else if line.starts_with("--- ") && lines.get(i + 1).is_some_and(|n| n.starts_with("+++ ")) {
            let old = strip_side(&line[4..], 'a').to_string();
            let new = strip_side(&lines[i + 1][4..], 'b').to_string();
            let path = if new == "/dev/null" { old.clone() } else { new };
            match files.last_mut() {
                Some(f) if f.hunks.is_empty() => f.path = path,
                _ => files.push(FilePatch { path, hunks: Vec::new() }),
            }
            i += 2;
        } else if line.starts_with("@@ -") {
            let Some((old_start, old_len, new_start, new_len, section)) = parse_header(line) else {
                i += 1;
                continue;
            };
            let file_index = match files.len() {
                0 => return Err(CorpusError::HunkOutsideFile { line_no: i + 1 }),
                n => n - 1,
            };
            let hunk_index = files[file_index].hunks.len();
            let mismatch = || CorpusError::CountMismatch {
                file: files[file_index].path.clone(),
                hunk_index,
            };
            let mut hunk = Hunk { old_start, old_len, new_start, new_len, section, lines: Vec::new() };
            let (mut old_left, mut new_left) = (old_len, new_len);
            i += 1;
            while old_left > 0 || new_left > 0 {
                let Some(&body) = lines.get(i) else {
                    return Err(mismatch());
                };
                // a trailing empty string after the final newline is not a line
                if body.is_empty() && i + 1 == lines.len() {
                    return Err(mismatch());
                }
                let (marker, text) = match body.as_bytes().first() {
                    None => (LineMarker::Context, ""),
                    Some(b'\\') => {
                        i += 1;
                        continue;
                    }
                    Some(&b) => match LineMarker::decode(b) {
                        Some(m) => (m, &body[1..]),
                        None => return Err(mismatch()),
                    },
                };
                match marker {
                    LineMarker::Context if old_left > 0 && new_left > 0 => {
                        old_left -= 1;
                        new_left -= 1;
                    }
                    LineMarker::Removed if old_left > 0 => old_left -= 1,
                    LineMarker::Added if new_left > 0 => new_left -= 1,
                    _ => return Err(mismatch()),
                }
                hunk.lines.push(HunkLine { marker, text: text.to_string() });
                i += 1;
            }
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            // surplus body lines mean the stated lengths were too small
            if let Some(next) = lines.get(i) {
                let is_header = next.starts_with("--- ") && lines.get(i + 1).is_some_and(|n| n.starts_with("+++ "));
                let is_signature = *next == "-- ";
                if !is_header && !is_signature && matches!(next.as_bytes().first(), Some(b' ' | b'+' | b'-')) {
                    return Err(mismatch());
                }
            }
            debug_assert!(hunk.is_consistent());
            files[file_index].hunks.push(hunk);
        } else {
            i += 1;
        }
    }

    files.retain(|f| !f.hunks.is_empty());
    if files.is_empty() {
        return Err(CorpusError::NoHunks);
    }
    Ok(PatchDocument { cve_id: cve_id.to_string(), files, raw_text: raw.to_string() })
}

/// Applies hunks (sorted by `old_start`) to `text`, whose first line is
/// line `first_line` of the file the hunks were written against.
///
/// Every context and removed line must match the text exactly.
pub fn apply_hunks(text: &str, hunks: &[Hunk], first_line: usize) -> Result<String, ApplyError> {
    let (body, trailing_newline) = match text.strip_suffix('\n') {
        Some(b) => (b, true),
        // an empty file gains line-terminated content
        None => (text, text.is_empty()),
    };
    let src: Vec<&str> = if text.is_empty() { Vec::new() } else { body.split('\n').collect() };
    let mut out: Vec<&str> = Vec::with_capacity(src.len());
    let mut cursor = 0usize;

    for (index, hunk) in hunks.iter().enumerate() {
        // a zero-length old side means "insert after line old_start"
        let start = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start.saturating_sub(1) };
        let local = start
            .checked_sub(first_line.saturating_sub(1))
            .ok_or(ApplyError::OutOfRange { hunk: index })?;
        if local < cursor || local > src.len() {
            return Err(ApplyError::OutOfRange { hunk: index });
        }
        out.extend_from_slice(&src[cursor..local]);
        let mut pos = local;
        for line in &hunk.lines {
            match line.marker {
                LineMarker::Context | LineMarker::Removed => {
                    if src.get(pos) != Some(&line.text.as_str()) {
                        return Err(ApplyError::AnchorMismatch { hunk: index, line: pos + first_line });
                    }
                    if line.marker == LineMarker::Context {
                        out.push(&line.text);
                    }
                    pos += 1;
                }
                LineMarker::Added => out.push(&line.text),
            }
        }
        cursor = pos;
    }
    out.extend_from_slice(&src[cursor..]);

    let mut joined = out.join("\n");
    if trailing_newline && !out.is_empty() {
        joined.push('\n');
    }
    Ok(joined)
}

/// Undoes [`apply_hunks`]: `first_line` is relative to the post-image.
pub fn reverse_hunks(text: &str, hunks: &[Hunk], first_line: usize) -> Result<String, ApplyError> {
    let reversed: Vec<Hunk> = hunks.iter().map(Hunk::reversed).collect();
    apply_hunks(text, &reversed, first_line)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("hunk {hunk} falls outside the text")]
    OutOfRange { hunk: usize },
    #[error("hunk {hunk} does not match the text at line {line}")]
    AnchorMismatch { hunk: usize, line: usize },
}
