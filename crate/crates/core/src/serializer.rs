//! Evidence text: the only form in which memory leaves the engine.
//!
//! ```text
//! Relevant Knowledge:
//! [paris|capital_of|france]
//! [seine|flows_through|paris]
//! ```
//!
//! `|`, `[`, `]`, `\` and newline inside a field are written as `\|`, `\[`,
//! `\]`, `\\` and `\n`. An empty edge list is written as a single `[none]`
//! line.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::Triple;

pub const HEADER: &str = "Relevant Knowledge:";
pub const EMPTY_MARKER: &str = "[none]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceText(String);

impl EvidenceText {
    /// Wraps arbitrary evidence (used for raw-text baselines).
    pub fn raw(text: impl Into<String>) -> Self {
        EvidenceText(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for EvidenceText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn escape_into(out: &mut String, field: &str) {
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '[' => out.push_str("\\["),
            ']' => out.push_str("\\]"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

pub fn format_line(t: &Triple) -> String {
    let mut line = String::with_capacity(t.head.len() + t.relation.len() + t.tail.len() + 4);
    line.push('[');
    escape_into(&mut line, &t.head);
    line.push('|');
    escape_into(&mut line, &t.relation);
    line.push('|');
    escape_into(&mut line, &t.tail);
    line.push(']');
    line
}

pub fn serialize<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> EvidenceText {
    let mut out = String::from(HEADER);
    let mut any = false;
    for t in triples {
        out.push('\n');
        out.push_str(&format_line(t));
        any = true;
    }
    if !any {
        out.push('\n');
        out.push_str(EMPTY_MARKER);
    }
    EvidenceText(out)
}

pub fn compose_prompt(evidence: &EvidenceText, question: &str) -> String {
    format!("{}\n\nQuestion: {question}\nAnswer:", evidence.as_str())
}

/// A line that could not be read as a triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineWarning {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub triples: Vec<Triple>,
    pub warnings: Vec<LineWarning>,
}

/// Parses one `[h|r|t]` line.
pub fn parse_line(line: &str) -> Result<Triple, String> {
    let body = line
        .strip_prefix('[')
        .ok_or_else(|| "line does not start with '['".to_string())?;
    let mut fields = vec![String::new()];
    let mut chars = body.chars();
    let mut closed = false;
    while let Some(c) = chars.next() {
        if closed {
            return Err("trailing characters after ']'".into());
        }
        match c {
            '\\' => {
                let decoded = match chars.next() {
                    Some('\\') => '\\',
                    Some('|') => '|',
                    Some('[') => '[',
                    Some(']') => ']',
                    Some('n') => '\n',
                    Some(other) => return Err(format!("unknown escape '\\{other}'")),
                    None => return Err("dangling escape".into()),
                };
                fields.last_mut().unwrap().push(decoded);
            }
            '|' => fields.push(String::new()),
            ']' => closed = true,
            '[' => return Err("unescaped '['".into()),
            c => fields.last_mut().unwrap().push(c),
        }
    }
    if !closed {
        return Err("missing closing ']'".into());
    }
    match <[String; 3]>::try_from(fields) {
        Ok([head, relation, tail]) => Ok(Triple { head, relation, tail }),
        Err(fields) => Err(format!("expected 3 fields, found {}", fields.len())),
    }
}

/// Parses bracket lines without a header, skipping malformed lines. An echoed
/// header line is ignored.
pub fn parse_lines(text: &str) -> Parsed {
    let mut parsed = Parsed::default();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line == EMPTY_MARKER || line.trim() == HEADER {
            continue;
        }
        match parse_line(line) {
            Ok(t) => parsed.triples.push(t),
            Err(reason) => parsed.warnings.push(LineWarning { line: i + 1, reason }),
        }
    }
    parsed
}

/// Inverse of [`serialize`]. The header line is required.
pub fn parse(text: &str) -> Result<Parsed> {
    let body = match text.split_once('\n') {
        Some((HEADER, body)) => body,
        None if text == HEADER => "",
        _ => return Err(Error::Parse(format!("missing '{HEADER}' header"))),
    };
    let mut parsed = Parsed::default();
    for (i, line) in body.split('\n').enumerate() {
        if line == EMPTY_MARKER {
            continue;
        }
        match parse_line(line) {
            Ok(t) => parsed.triples.push(t),
            Err(reason) => parsed.warnings.push(LineWarning { line: i + 2, reason }),
        }
    }
    Ok(parsed)
}

/// Splits a composed prompt back into its evidence block and question.
pub fn split_prompt(prompt: &str) -> Option<(&str, &str)> {
    let (evidence, rest) = prompt.split_once("\n\nQuestion: ")?;
    let question = rest.strip_suffix("\nAnswer:")?;
    Some((evidence, question))
}
