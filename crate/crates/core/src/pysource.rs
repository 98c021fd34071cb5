//! Lightweight Python source tokenizer.
//!
//! Only distinguishes what the preprocessing needs: string literals
//! (including prefixed and triple-quoted forms), `#` comments, physical
//! newlines and everything else. Bracket depth and backslash continuations
//! are tracked so that logical lines can be recovered.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token<'a> {
    Code(&'a str),
    Str(&'a str),
    Comment(&'a str),
    /// A physical newline. `logical` is false inside brackets or after a
    /// backslash continuation.
    Newline {
        logical: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizeError {
    pub offset: usize,
    pub reason: &'static str,
}

impl fmt::Display for TokenizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.reason, self.offset)
    }
}

impl std::error::Error for TokenizeError {}

fn string_prefix_len(src: &[u8], start: usize) -> Option<usize> {
    // Valid prefixes: r u b f and two-letter combinations of r with b/f.
    let mut i = start;
    let mut taken = 0;
    while i < src.len() && taken < 2 && matches!(src[i].to_ascii_lowercase(), b'r' | b'u' | b'b' | b'f') {
        i += 1;
        taken += 1;
    }
    if i < src.len() && (src[i] == b'"' || src[i] == b'\'') {
        if start > 0 {
            let prev = src[start - 1];
            if prev.is_ascii_alphanumeric() || prev == b'_' {
                return None;
            }
        }
        Some(taken)
    } else {
        None
    }
}

pub fn tokenize(source: &str) -> Result<Vec<Token<'_>>, TokenizeError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut depth: i64 = 0;
    let mut code_start = 0;
    let mut i = 0;

    fn flush<'a>(source: &'a str, tokens: &mut Vec<Token<'a>>, from: usize, to: usize) {
        if to > from {
            tokens.push(Token::Code(&source[from..to]));
        }
    }

    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'#' => {
                flush(source, &mut tokens, code_start, i);
                let end = source[i..].find('\n').map_or(bytes.len(), |n| i + n);
                tokens.push(Token::Comment(&source[i..end]));
                i = end;
                code_start = i;
            }
            b'\n' => {
                let continued = i > 0 && bytes[i - 1] == b'\\' && code_start < i;
                flush(source, &mut tokens, code_start, i);
                tokens.push(Token::Newline {
                    logical: depth <= 0 && !continued,
                });
                i += 1;
                code_start = i;
            }
            b'(' | b'[' | b'{' => {
                depth += 1;
                i += 1;
            }
            b')' | b']' | b'}' => {
                depth -= 1;
                i += 1;
            }
            _ => {
                let prefix = if c == b'"' || c == b'\'' {
                    Some(0)
                } else if c.is_ascii_alphabetic() {
                    string_prefix_len(bytes, i)
                } else {
                    None
                };
                match prefix {
                    Some(plen) => {
                        flush(source, &mut tokens, code_start, i);
                        let end = scan_string(bytes, i, plen)?;
                        tokens.push(Token::Str(&source[i..end]));
                        i = end;
                        code_start = i;
                    }
                    None => {
                        // Advance over one UTF-8 scalar.
                        i += utf8_len(c);
                    }
                }
            }
        }
    }
    flush(source, &mut tokens, code_start, bytes.len());
    Ok(tokens)
}

fn utf8_len(first: u8) -> usize {
    match first {
        0x00..=0x7f => 1,
        0xc0..=0xdf => 2,
        0xe0..=0xef => 3,
        _ => 4,
    }
}

fn scan_string(bytes: &[u8], start: usize, prefix_len: usize) -> Result<usize, TokenizeError> {
    let q = start + prefix_len;
    let quote = bytes[q];
    let triple = q + 2 < bytes.len() && bytes[q + 1] == quote && bytes[q + 2] == quote;
    let mut i = if triple { q + 3 } else { q + 1 };
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\\' {
            // Even raw strings cannot end on an escaped quote.
            i += 2;
            continue;
        }
        if triple {
            if c == quote && bytes.get(i + 1) == Some(&quote) && bytes.get(i + 2) == Some(&quote) {
                return Ok(i + 3);
            }
        } else {
            if c == quote {
                return Ok(i + 1);
            }
            if c == b'\n' {
                return Err(TokenizeError {
                    offset: start,
                    reason: "unterminated string literal",
                });
            }
        }
        i += 1;
    }
    Err(TokenizeError {
        offset: start,
        reason: "unterminated string literal",
    })
}

#[derive(Debug)]
struct LogicalLine<'a> {
    tokens: Vec<Token<'a>>,
    /// Whether the line ended with a newline token (false only at EOF).
    terminated: bool,
}

impl LogicalLine<'_> {
    fn is_blank(&self) -> bool {
        self.tokens.iter().all(|t| match t {
            Token::Code(c) => c.trim().is_empty() || c.trim() == "\\",
            Token::Comment(_) | Token::Newline { .. } => true,
            Token::Str(_) => false,
        })
    }

    fn is_string_statement(&self) -> bool {
        let mut saw_string = false;
        for t in &self.tokens {
            match t {
                Token::Str(_) => saw_string = true,
                Token::Code(c) if c.trim().is_empty() || c.trim() == "\\" => {}
                Token::Code(_) => return false,
                Token::Comment(_) | Token::Newline { .. } => {}
            }
        }
        saw_string
    }

    fn indent(&self) -> &str {
        match self.tokens.first() {
            Some(Token::Code(c)) => {
                let n = c.len() - c.trim_start_matches([' ', '\t']).len();
                &c[..n]
            }
            _ => "",
        }
    }

    fn ends_with_colon(&self) -> bool {
        self.tokens
            .iter()
            .rev()
            .find_map(|t| match t {
                Token::Code(c) if !c.trim().is_empty() => Some(c.trim_end().ends_with(':')),
                Token::Str(_) => Some(false),
                _ => None,
            })
            .unwrap_or(false)
    }
}

fn logical_lines<'a>(tokens: Vec<Token<'a>>) -> Vec<LogicalLine<'a>> {
    let mut lines = Vec::new();
    let mut current = Vec::new();
    for t in tokens {
        let end = matches!(t, Token::Newline { logical: true });
        current.push(t);
        if end {
            lines.push(LogicalLine {
                tokens: std::mem::take(&mut current),
                terminated: true,
            });
        }
    }
    if !current.is_empty() {
        lines.push(LogicalLine {
            tokens: current,
            terminated: false,
        });
    }
    lines
}

/// Removes `#` comments and statement-position string literals (docstrings).
///
/// Lines that held only a comment are dropped, trailing whitespace left
/// behind by a removed comment is trimmed, and a block whose only statement
/// was a docstring receives a `pass`. On tokenization failure the input is
/// returned unchanged and a warning is logged.
pub fn strip_comments(source: &str) -> String {
    let tokens = match tokenize(source) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("strip_comments: {e}; returning source unchanged");
            return source.to_string();
        }
    };
    let lines = logical_lines(tokens);
    let significant: Vec<usize> = (0..lines.len()).filter(|&i| !lines[i].is_blank()).collect();

    let mut out = String::with_capacity(source.len());
    for (li, line) in lines.iter().enumerate() {
        if line.is_string_statement() {
            let pos = significant
                .iter()
                .position(|&s| s == li)
                .expect("string line is significant");
            let prev_opens_block = pos > 0 && lines[significant[pos - 1]].ends_with_colon();
            let indent = line.indent();
            let next_dedents = match significant.get(pos + 1) {
                None => true,
                Some(&n) => lines[n].indent().len() < indent.len(),
            };
            if prev_opens_block && next_dedents {
                out.push_str(indent);
                out.push_str("pass");
                if line.terminated {
                    out.push('\n');
                }
            }
            continue;
        }
        emit_line(line, &mut out);
    }
    out
}

fn emit_line(line: &LogicalLine<'_>, out: &mut String) {
    let mut phys_start = out.len();
    let mut phys_had_content = false;
    let mut protected = out.len();
    let mut removed_comment = false;
    for t in &line.tokens {
        match t {
            Token::Code(c) => {
                phys_had_content |= !c.trim().is_empty();
                out.push_str(c);
            }
            Token::Str(s) => {
                phys_had_content = true;
                out.push_str(s);
                protected = out.len();
            }
            Token::Comment(_) => removed_comment = true,
            Token::Newline { .. } => {
                if removed_comment {
                    while out.len() > protected.max(phys_start) && out.ends_with([' ', '\t']) {
                        out.pop();
                    }
                }
                if removed_comment && !phys_had_content && out[phys_start..].trim().is_empty() {
                    out.truncate(phys_start);
                } else {
                    out.push('\n');
                }
                phys_start = out.len();
                protected = out.len();
                phys_had_content = false;
                removed_comment = false;
            }
        }
    }
    if removed_comment {
        while out.len() > protected.max(phys_start) && out.ends_with([' ', '\t']) {
            out.pop();
        }
        if !phys_had_content && out[phys_start..].trim().is_empty() {
            out.truncate(phys_start);
        }
    }
}

/// Returns the body of the first triple-quoted string in `source`, dedented.
pub fn first_docstring(source: &str) -> Option<String> {
    let tokens = tokenize(source).ok()?;
    tokens.into_iter().find_map(|t| match t {
        Token::Str(s) => {
            let body = s.trim_start_matches(|c: char| c.is_ascii_alphabetic());
            let inner = body
                .strip_prefix("\"\"\"")
                .and_then(|b| b.strip_suffix("\"\"\""))
                .or_else(|| body.strip_prefix("'''").and_then(|b| b.strip_suffix("'''")))?;
            Some(clean_doc(inner))
        }
        _ => None,
    })
}

/// Docstring normalisation: the first line is stripped on its own, the
/// rest share a common indent removal, and blank edges are dropped.
fn clean_doc(inner: &str) -> String {
    let (first, rest) = inner.split_once('\n').unwrap_or((inner, ""));
    let mut out = first.trim().to_string();
    let rest = dedent(rest);
    if !rest.trim().is_empty() {
        out.push('\n');
        out.push_str(&rest);
    }
    out.trim().to_string()
}

pub fn dedent(text: &str) -> String {
    let min = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    text.lines()
        .map(|l| if l.len() >= min { &l[min..] } else { l.trim_start() })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Names of functions defined with `def` / `async def`, in order.
pub fn defined_functions(source: &str) -> Vec<String> {
    source
        .lines()
        .filter_map(|l| {
            let t = l.trim_start();
            let t = t.strip_prefix("async ").unwrap_or(t);
            let rest = t.strip_prefix("def ")?;
            let name: String = rest
                .trim_start()
                .chars()
                .take_while(|c| c.is_alphanumeric() || *c == '_')
                .collect();
            (!name.is_empty()).then_some(name)
        })
        .collect()
}

/// The first `def` header line of `source`, if any.
pub fn first_def_line(source: &str) -> Option<&str> {
    source.lines().find(|l| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("async def ")
    })
}
