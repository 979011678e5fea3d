//! Lightweight Rust function extraction.
//!
//! This is not a parser. Source text is lexed just far enough to know which
//! characters are code (as opposed to comments and string, char, or raw-string
//! literals). Each `fn <name>` signature found at item level is then followed
//! to its matching closing brace. That works on fragments cut from the middle
//! of a file, which a real grammar would reject.

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpan {
    pub file_path: String,
    pub name: String,
    /// 1-based, inclusive.
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
    /// Set for fallback regions rebuilt from hunk lines that do not form a
    /// complete function. Regions are exempt from the brace and `fn` checks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub region: bool,
}

impl FunctionSpan {
    pub fn line_count(&self) -> usize {
        self.end_line + 1 - self.start_line
    }

    pub fn contains_line(&self, line: usize) -> bool {
        (self.start_line..=self.end_line).contains(&line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Code(char),
    Space,
    Literal,
    DocComment,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    tok: Tok,
    line: usize,
}

fn is_ident_char(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

fn lex(source: &str) -> Vec<Token> {
    let chars: Vec<char> = source.chars().collect();
    let n = chars.len();
    let at = |i: usize| chars.get(i).copied();
    let mut out = Vec::with_capacity(n);
    let mut line = 1usize;
    let mut i = 0usize;

    while i < n {
        let c = chars[i];
        let start_line = line;
        let prev_ident = i > 0 && is_ident_char(chars[i - 1]);

        if c == '\n' {
            out.push(Token { tok: Tok::Space, line });
            line += 1;
            i += 1;
        } else if c.is_whitespace() {
            out.push(Token { tok: Tok::Space, line });
            i += 1;
        } else if c == '/' && at(i + 1) == Some('/') {
            // `///` is an outer doc comment, `////` is not
            let doc = at(i + 2) == Some('/') && at(i + 3) != Some('/');
            while i < n && chars[i] != '\n' {
                i += 1;
            }
            out.push(Token { tok: if doc { Tok::DocComment } else { Tok::Space }, line: start_line });
        } else if c == '/' && at(i + 1) == Some('*') {
            let doc = at(i + 2) == Some('*') && !matches!(at(i + 3), Some('*') | Some('/'));
            let mut depth = 0usize;
            while i < n {
                if chars[i] == '/' && at(i + 1) == Some('*') {
                    depth += 1;
                    i += 2;
                } else if chars[i] == '*' && at(i + 1) == Some('/') {
                    depth -= 1;
                    i += 2;
                    if depth == 0 {
                        break;
                    }
                } else {
                    if chars[i] == '\n' {
                        line += 1;
                    }
                    i += 1;
                }
            }
            out.push(Token { tok: if doc { Tok::DocComment } else { Tok::Space }, line: start_line });
        } else if !prev_ident && raw_string_hashes(&chars, i).is_some() {
            let (body_start, hashes) = raw_string_hashes(&chars, i).unwrap_or_default();
            i = body_start;
            while i < n {
                if chars[i] == '"' && (1..=hashes).all(|k| at(i + k) == Some('#')) {
                    i += 1 + hashes;
                    break;
                }
                if chars[i] == '\n' {
                    line += 1;
                }
                i += 1;
            }
            out.push(Token { tok: Tok::Literal, line: start_line });
        } else if c == '"' || (c == 'b' && !prev_ident && at(i + 1) == Some('"')) {
            i += if c == 'b' { 2 } else { 1 };
            while i < n {
                match chars[i] {
                    '\\' => {
                        if at(i + 1) == Some('\n') {
                            line += 1;
                        }
                        i += 2;
                    }
                    '"' => {
                        i += 1;
                        break;
                    }
                    ch => {
                        if ch == '\n' {
                            line += 1;
                        }
                        i += 1;
                    }
                }
            }
            out.push(Token { tok: Tok::Literal, line: start_line });
        } else if c == '\'' || (c == 'b' && !prev_ident && at(i + 1) == Some('\'')) {
            let q = if c == 'b' { i + 1 } else { i };
            if at(q + 1) == Some('\\') {
                // escaped char literal: '\n', '\'', '\u{7FFF}'
                i = q + 3;
                while i < n && chars[i] != '\'' && chars[i] != '\n' {
                    i += 1;
                }
                i += 1;
                out.push(Token { tok: Tok::Literal, line: start_line });
            } else if at(q + 2) == Some('\'') && at(q + 1) != Some('\n') {
                i = q + 3;
                out.push(Token { tok: Tok::Literal, line: start_line });
            } else {
                // lifetime or label
                out.push(Token { tok: Tok::Code(c), line });
                i += 1;
            }
        } else {
            out.push(Token { tok: Tok::Code(c), line });
            i += 1;
        }
    }
    out
}

// `r"`, `r#"`, `br##"` ... returns (index after the opening quote, hash count)
fn raw_string_hashes(chars: &[char], i: usize) -> Option<(usize, usize)> {
    let mut j = i;
    if chars.get(j) == Some(&'b') {
        j += 1;
    }
    if chars.get(j) != Some(&'r') {
        return None;
    }
    j += 1;
    let mut hashes = 0;
    while chars.get(j) == Some(&'#') {
        hashes += 1;
        j += 1;
    }
    (chars.get(j) == Some(&'"')).then_some((j + 1, hashes))
}

struct Scanner<'a> {
    toks: &'a [Token],
    pos: usize,
}

impl Scanner<'_> {
    fn skip_space(&self, mut k: usize) -> usize {
        while k < self.toks.len() && matches!(self.toks[k].tok, Tok::Space | Tok::DocComment) {
            k += 1;
        }
        k
    }

    fn code_at(&self, k: usize) -> Option<char> {
        match self.toks.get(k)?.tok {
            Tok::Code(c) => Some(c),
            _ => None,
        }
    }

    fn ident_at(&self, k: usize) -> (String, usize) {
        let mut s = String::new();
        let mut j = k;
        while let Some(c) = self.code_at(j) {
            if !is_ident_char(c) {
                break;
            }
            s.push(c);
            j += 1;
        }
        (s, j)
    }

    // Matching close for the bracket at `k`, counting only code tokens.
    fn matching(&self, k: usize, open: char, close: char) -> Option<usize> {
        let mut depth = 0usize;
        for j in k..self.toks.len() {
            match self.code_at(j) {
                Some(c) if c == open => depth += 1,
                Some(c) if c == close => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(j);
                    }
                }
                _ => {}
            }
        }
        None
    }
}

/// Extracts top-level function spans from Rust source text.
///
/// Functions nested inside another function's body are reported only as part
/// of their parent. Methods inside `impl` and `trait` blocks are reported
/// individually. Signatures without a body (trait declarations, extern
/// blocks) are skipped.
pub fn extract_functions(source: &str, file_path: &str) -> Result<Vec<FunctionSpan>, CorpusError> {
    let toks = lex(source);
    let lines: Vec<&str> = source.split('\n').collect();
    let mut sc = Scanner { toks: &toks, pos: 0 };
    let mut spans: Vec<FunctionSpan> = Vec::new();
    let mut item_start: Option<usize> = None;
    let mut preamble_start: Option<usize> = None;

    while sc.pos < toks.len() {
        let Token { tok, line } = toks[sc.pos];
        match tok {
            Tok::Space => sc.pos += 1,
            Tok::DocComment => {
                preamble_start.get_or_insert(line);
                sc.pos += 1;
            }
            Tok::Literal => {
                item_start.get_or_insert(line);
                sc.pos += 1;
            }
            Tok::Code('#') => {
                let mut k = sc.skip_space(sc.pos + 1);
                let inner = sc.code_at(k) == Some('!');
                if inner {
                    k = sc.skip_space(k + 1);
                }
                if sc.code_at(k) == Some('[') {
                    if !inner && item_start.is_none() {
                        preamble_start.get_or_insert(line);
                    }
                    sc.pos = sc.matching(k, '[', ']').map_or(toks.len(), |e| e + 1);
                } else {
                    item_start.get_or_insert(line);
                    sc.pos += 1;
                }
            }
            Tok::Code(';' | '{' | '}') => {
                item_start = None;
                preamble_start = None;
                sc.pos += 1;
            }
            Tok::Code(c) if is_ident_char(c) => {
                let prev_is_ident = sc.pos > 0 && matches!(toks[sc.pos - 1].tok, Tok::Code(p) if is_ident_char(p));
                let (word, after) = sc.ident_at(sc.pos);
                if prev_is_ident || word != "fn" {
                    item_start.get_or_insert(line);
                    sc.pos = after;
                    continue;
                }
                let sig_line = *item_start.get_or_insert(line);
                let name_at = sc.skip_space(after);
                let (mut name, mut k) = sc.ident_at(name_at);
                if name.is_empty() || name.starts_with(|ch: char| ch.is_ascii_digit()) {
                    // `fn(u8) -> u8` pointer type, not an item
                    sc.pos = after;
                    continue;
                }
                if name == "r" && sc.code_at(k) == Some('#') {
                    let (raw, end) = sc.ident_at(k + 1);
                    name = format!("r#{raw}");
                    k = end;
                }

                // find the body, ignoring `;` inside parameter lists and array types
                let mut depth = 0i32;
                let mut body = None;
                while k < toks.len() {
                    match sc.code_at(k) {
                        Some('(' | '[') => depth += 1,
                        Some(')' | ']') => depth -= 1,
                        Some('{') if depth <= 0 => {
                            body = Some(k);
                            break;
                        }
                        Some(';') if depth <= 0 => break,
                        _ => {}
                    }
                    k += 1;
                }
                let Some(open) = body else {
                    item_start = None;
                    preamble_start = None;
                    sc.pos = k + 1;
                    continue;
                };
                let Some(close) = sc.matching(open, '{', '}') else {
                    return Err(CorpusError::UnbalancedBraces { file: file_path.to_string(), line: sig_line });
                };
                let start_line = preamble_start.unwrap_or(sig_line);
                let end_line = toks[close].line;
                let overlaps = spans.last().is_some_and(|s| s.end_line >= start_line);
                if !overlaps {
                    spans.push(FunctionSpan {
                        file_path: file_path.to_string(),
                        name,
                        start_line,
                        end_line,
                        text: lines[start_line - 1..end_line].join("\n"),
                        region: false,
                    });
                }
                item_start = None;
                preamble_start = None;
                sc.pos = close + 1;
            }
            Tok::Code(_) => {
                item_start.get_or_insert(line);
                sc.pos += 1;
            }
        }
    }
    Ok(spans)
}

/// True when `{` and `}` balance in code context.
pub fn braces_balanced(text: &str) -> bool {
    let mut depth = 0i64;
    for t in lex(text) {
        match t.tok {
            Tok::Code('{') => depth += 1,
            Tok::Code('}') => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// True when `fn` occurs as a keyword in code context.
pub fn has_fn_keyword(text: &str) -> bool {
    let toks = lex(text);
    let sc = Scanner { toks: &toks, pos: 0 };
    (0..toks.len()).any(|k| {
        let prev_ident = k > 0 && matches!(toks[k - 1].tok, Tok::Code(p) if is_ident_char(p));
        !prev_ident && sc.code_at(k) == Some('f') && sc.ident_at(k).0 == "fn"
    })
}
