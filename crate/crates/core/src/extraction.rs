//! Candidate triple extraction for one chunk.

use std::thread;

use crate::chunker::{tokenize, Chunk};
use crate::client::{Message, ServiceClient};
use crate::error::{Error, Result};
use crate::model::Triple;
use crate::serializer::{parse_lines, LineWarning};

/// Produces candidate triples for a chunk, most confident first.
pub trait Extractor: Send + Sync {
    fn extract(&self, chunk: &Chunk) -> Result<Vec<Triple>>;

    /// Extracts every chunk of a document; output is aligned with `chunks`.
    fn extract_all(&self, chunks: &[Chunk]) -> Result<Vec<Vec<Triple>>> {
        chunks.iter().map(|c| self.extract(c)).collect()
    }
}

/// Relation phrases understood by [`RuleExtractor`], as `(relation id, surface phrase)`.
pub const STANDARD_RELATIONS: &[(&str, &str)] = &[
    ("works_for", "works for"),
    ("studied_at", "studied at"),
    ("was_born_in", "was born in"),
    ("lives_in", "lives in"),
    ("is_married_to", "is married to"),
    ("mentors", "mentors"),
    ("is_headquartered_in", "is headquartered in"),
    ("was_founded_by", "was founded by"),
    ("acquired", "acquired"),
    ("supplies", "supplies"),
    ("is_located_in", "is located in"),
    ("is_twinned_with", "is twinned with"),
    ("borders", "borders"),
    ("exports_to", "exports to"),
    ("is_governed_by", "is governed by"),
    ("sponsors", "sponsors"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationPhrase {
    pub id: String,
    pub tokens: Vec<String>,
}

/// A closed set of `<head> <phrase> <tail>.` sentence templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleGrammar {
    relations: Vec<RelationPhrase>,
}

impl RuleGrammar {
    pub fn new<I, S, P>(relations: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, P)>,
        S: Into<String>,
        P: AsRef<str>,
    {
        let relations: Vec<RelationPhrase> = relations
            .into_iter()
            .map(|(id, phrase)| RelationPhrase {
                id: id.into(),
                tokens: tokenize(&phrase.as_ref().to_lowercase()).into_iter().map(String::from).collect(),
            })
            .collect();
        for (i, a) in relations.iter().enumerate() {
            if a.tokens.is_empty() {
                return Err(Error::Config(format!("relation {} has an empty phrase", a.id)));
            }
            for b in &relations[i + 1..] {
                if a.tokens.starts_with(&b.tokens) || b.tokens.starts_with(&a.tokens) {
                    return Err(Error::Config(format!(
                        "relation phrases for {} and {} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(RuleGrammar { relations })
    }

    pub fn standard() -> Self {
        RuleGrammar::new(STANDARD_RELATIONS.iter().copied()).expect("standard grammar is valid")
    }

    pub fn relations(&self) -> &[RelationPhrase] {
        &self.relations
    }

    pub fn phrase(&self, id: &str) -> Option<&RelationPhrase> {
        self.relations.iter().find(|r| r.id == id)
    }

    /// Matches one sentence (without its terminator). Exactly one relation
    /// phrase occurrence with non-empty head and tail is required.
    fn match_sentence(&self, tokens: &[&str]) -> Option<Triple> {
        let mut found = None;
        for rel in &self.relations {
            let n = rel.tokens.len();
            if tokens.len() < n + 2 {
                continue;
            }
            for at in 1..=tokens.len() - n - 1 {
                if tokens[at..at + n].iter().zip(&rel.tokens).all(|(a, b)| a.eq_ignore_ascii_case(b)) {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((rel, at));
                }
            }
        }
        let (rel, at) = found?;
        let head = tokens[..at].join(" ");
        let tail = tokens[at + rel.tokens.len()..].join(" ");
        Some(Triple::new(head, rel.id.clone(), tail))
    }
}

impl Default for RuleGrammar {
    fn default() -> Self {
        RuleGrammar::standard()
    }
}

fn is_terminator(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Every grammar-matching sentence in `text`, in document order.
///
/// When `leading_fragment` is false, tokens before the first terminator are
/// skipped because they may be the tail of a sentence cut by a chunk boundary.
/// A trailing run without a terminator is always skipped.
pub fn rule_extract_text(text: &str, grammar: &RuleGrammar, leading_fragment: bool) -> Vec<Triple> {
    let tokens = tokenize(text);
    let mut out = Vec::new();
    let mut sentence_start = 0;
    let mut first = true;
    for (i, tok) in tokens.iter().enumerate() {
        if !is_terminator(tok) {
            continue;
        }
        if leading_fragment || !first {
            if let Some(t) = grammar.match_sentence(&tokens[sentence_start..i]) {
                out.push(t);
            }
        }
        first = false;
        sentence_start = i + 1;
    }
    out
}

pub fn rule_extract(chunk: &Chunk, grammar: &RuleGrammar) -> Vec<Triple> {
    rule_extract_text(&chunk.text, grammar, chunk.start == 0)
}

/// Deterministic template-matching extractor.
#[derive(Debug, Clone, Default)]
pub struct RuleExtractor {
    pub grammar: RuleGrammar,
}

impl RuleExtractor {
    pub fn new(grammar: RuleGrammar) -> Self {
        RuleExtractor { grammar }
    }

    pub fn standard() -> Self {
        RuleExtractor::new(RuleGrammar::standard())
    }
}

impl Extractor for RuleExtractor {
    fn extract(&self, chunk: &Chunk) -> Result<Vec<Triple>> {
        Ok(rule_extract(chunk, &self.grammar))
    }
}

pub const DEFAULT_EXTRACTION_PROMPT: &str = "Extract the factual (head, relation, tail) triples stated in the passage below. \
Write one triple per line as [head|relation|tail], most important first, using short snake_case relations. \
Output nothing else.\n\nPassage:\n{chunk}";

/// Extractor backed by a chat-completion service.
#[derive(Debug)]
pub struct RemoteExtractor {
    client: ServiceClient,
    /// Prompt with a `{chunk}` placeholder.
    pub prompt_template: String,
}

impl RemoteExtractor {
    pub fn new(client: ServiceClient) -> Self {
        RemoteExtractor {
            client,
            prompt_template: DEFAULT_EXTRACTION_PROMPT.to_string(),
        }
    }

    pub fn client(&self) -> &ServiceClient {
        &self.client
    }

    /// Extraction with the line-level parse diagnostics.
    pub fn extract_with_warnings(&self, chunk: &Chunk) -> Result<(Vec<Triple>, Vec<LineWarning>)> {
        let prompt = self.prompt_template.replace("{chunk}", &chunk.text);
        let response = self.client.chat(&[Message::user(prompt)])?;
        let parsed = parse_lines(&response);
        if parsed.triples.is_empty() && !parsed.warnings.is_empty() {
            log::warn!(
                "chunk {}: extraction response had no parseable triples ({} malformed lines)",
                chunk.index,
                parsed.warnings.len()
            );
        }
        Ok((parsed.triples, parsed.warnings))
    }
}

impl Extractor for RemoteExtractor {
    fn extract(&self, chunk: &Chunk) -> Result<Vec<Triple>> {
        self.extract_with_warnings(chunk).map(|(t, _)| t)
    }

    /// Issues at most `max_in_flight` concurrent requests.
    fn extract_all(&self, chunks: &[Chunk]) -> Result<Vec<Vec<Triple>>> {
        let width = self.client.config().max_in_flight.max(1);
        let mut out = Vec::with_capacity(chunks.len());
        for window in chunks.chunks(width) {
            let results: Vec<Result<Vec<Triple>>> = thread::scope(|s| {
                let handles: Vec<_> = window.iter().map(|c| s.spawn(move || self.extract(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("extraction worker panicked"))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }
}
