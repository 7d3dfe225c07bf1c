//! Engine tokenizer and overlapping token-window chunking.
//!
//! Tokens are maximal runs of alphanumeric characters (plus `_`); every other
//! non-whitespace character is a token by itself. Lengths, budgets and field
//! caps are all measured in these tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::BuildConfig;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte ranges of every token in `text`.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            spans.push(start..i);
        }
        if !c.is_whitespace() {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(start) = word_start {
        spans.push(start..text.len());
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|r| &text[r]).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

pub fn token_count(text: &str) -> usize {
    token_spans(text).len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// 1-based chunk index.
    pub index: usize,
    /// Token span `[start, end)` in the source document.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Chunk {
    /// A standalone chunk covering all of `text`.
    pub fn whole(text: impl Into<String>) -> Self {
        let text = text.into();
        let end = token_count(&text);
        Chunk { index: 1, start: 0, end, text }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Splits `text` into windows of `chunk_len` tokens with stride
/// `chunk_len - overlap`. The final window may be shorter.
pub fn chunk(text: &str, cfg: &BuildConfig) -> Vec<Chunk> {
    let spans = token_spans(text);
    let total = spans.len();
    let mut chunks = Vec::new();
    if total == 0 {
        return chunks;
    }
    let stride = cfg.stride();
    let mut start = 0;
    loop {
        let end = (start + cfg.chunk_len).min(total);
        chunks.push(Chunk {
            index: chunks.len() + 1,
            start,
            end,
            text: text[spans[start].start..spans[end - 1].end].to_string(),
        });
        if end == total {
            break;
        }
        start += stride;
    }
    chunks
}

/// Number of chunks [`chunk`] produces for a document of `tokens` tokens.
pub fn chunk_count(tokens: usize, cfg: &BuildConfig) -> usize {
    match tokens {
        0 => 0,
        t if t <= cfg.chunk_len => 1,
        t => (t - cfg.overlap).div_ceil(cfg.stride()),
    }
}
