//! Streaming graph construction: for every chunk, truncate the extractor's
//! candidates to the per-chunk budget, then merge, filter and cap.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::chunker::{chunk, token_count, Chunk};
use crate::error::{Error, Result};
use crate::extraction::Extractor;
use crate::model::{edge_id, BuildConfig, Edge, FrozenGraph, GraphState, Triple};
use crate::reasoner::Reasoner;
use crate::serializer::{compose_prompt, serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    /// Empty fields, including candidates that fail canonicalization.
    pub schema: u64,
    pub field_length: u64,
    pub relation_type: u64,
    pub duplicate: u64,
}

impl FilterCounts {
    pub fn total(&self) -> u64 {
        self.schema + self.field_length + self.relation_type + self.duplicate
    }
}

/// Counters for one build. Every emitted candidate ends up in exactly one
/// bucket: `emitted = truncated + edges + merged_duplicates + filtered + evicted_by_cap`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub chunks_processed: usize,
    pub candidates_emitted: u64,
    /// Candidates past the per-chunk budget.
    pub truncated: u64,
    pub merged_duplicates: u64,
    pub filtered: FilterCounts,
    pub evicted_by_cap: u64,
    /// Occurrence counts carried by filtered or evicted edges.
    pub rejected_occurrences: u64,
    pub edges: usize,
}

/// Keeps the first candidates up to `per_chunk_cap` distinct canonical
/// triples. Repeats of an already admitted triple ride along without using a
/// slot; everything after the budget is exhausted is dropped.
pub fn truncate_candidates(candidates: Vec<Triple>, per_chunk_cap: usize) -> (Vec<Triple>, u64) {
    let mut slots = HashSet::new();
    let mut kept = Vec::with_capacity(candidates.len().min(per_chunk_cap));
    let mut dropped = 0;
    for t in candidates {
        let id = edge_id(&t);
        if slots.contains(&id) || slots.len() < per_chunk_cap {
            slots.insert(id);
            kept.push(t);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Canonicalizes and upserts each candidate.
pub fn merge(state: &mut GraphState, candidates: Vec<Triple>, chunk_index: usize, report: &mut BuildReport) {
    for t in candidates {
        match t.canonical() {
            Some(c) => {
                if !state.upsert(c, chunk_index) {
                    report.merged_duplicates += 1;
                }
            }
            None => report.filtered.schema += 1,
        }
    }
}

fn relation_charset_ok(relation: &str) -> bool {
    relation
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == ' ')
}

enum Violation {
    Schema,
    FieldLength,
    RelationType,
}

fn violation(edge: &Edge, cfg: &BuildConfig) -> Option<Violation> {
    let t = &edge.triple;
    if t.fields().iter().any(|f| f.trim().is_empty()) {
        return Some(Violation::Schema);
    }
    if t.fields().iter().any(|f| token_count(f) > cfg.field_cap) {
        return Some(Violation::FieldLength);
    }
    if !relation_charset_ok(&t.relation) {
        return Some(Violation::RelationType);
    }
    None
}

/// Removes edges that break schema, field-length or relation-type rules.
pub fn filter(state: &mut GraphState, cfg: &BuildConfig, report: &mut BuildReport) {
    let mut seen = HashSet::new();
    let removed = state.retain_edges(|e| {
        if !seen.insert(e.id) {
            return false;
        }
        violation(e, cfg).is_none()
    });
    let mut seen = HashSet::new();
    for e in &removed {
        report.rejected_occurrences += e.occurrence_count;
        if !seen.insert(e.id) {
            report.filtered.duplicate += 1;
            continue;
        }
        match violation(e, cfg) {
            Some(Violation::Schema) => report.filtered.schema += 1,
            Some(Violation::FieldLength) => report.filtered.field_length += 1,
            Some(Violation::RelationType) => report.filtered.relation_type += 1,
            None => report.filtered.duplicate += 1,
        }
    }
    debug_assert_eq!(report.filtered.duplicate, 0, "merge never produces duplicate ids");
}

/// Evicts the lowest `(occurrence_count, -insertion_order)` edges until at
/// most `capacity` remain: rarest first, newest first among equals.
pub fn cap(state: &mut GraphState, capacity: usize, report: &mut BuildReport) {
    let excess = state.len().saturating_sub(capacity);
    if excess == 0 {
        return;
    }
    let mut ranked: Vec<&Edge> = state.edges().iter().collect();
    ranked.sort_by_key(|e| e.retention_priority());
    let evict: HashSet<_> = ranked[..excess].iter().map(|e| e.id).collect();
    let removed = state.retain_edges(|e| !evict.contains(&e.id));
    report.evicted_by_cap += removed.len() as u64;
    report.rejected_occurrences += removed.iter().map(|e| e.occurrence_count).sum::<u64>();
}

/// One chunk of streaming construction.
pub fn step(
    state: &mut GraphState,
    chunk: &Chunk,
    candidates: Vec<Triple>,
    cfg: &BuildConfig,
    report: &mut BuildReport,
) {
    debug_assert_eq!(chunk.index, state.step + 1);
    report.candidates_emitted += candidates.len() as u64;
    let (kept, dropped) = truncate_candidates(candidates, cfg.per_chunk_cap);
    report.truncated += dropped;
    merge(state, kept, chunk.index, report);
    filter(state, cfg, report);
    cap(state, cfg.capacity, report);
    state.step = chunk.index;
    report.chunks_processed = state.step;
    report.edges = state.len();
}

/// Builds the memory graph of a document. The question is never consulted.
pub fn build(text: &str, extractor: &dyn Extractor, cfg: &BuildConfig) -> Result<(FrozenGraph, BuildReport)> {
    cfg.validate()?;
    let chunks = chunk(text, cfg);
    let candidates = extractor.extract_all(&chunks)?;
    let mut state = GraphState::new(cfg.capacity);
    let mut report = BuildReport::default();
    for (c, cands) in chunks.iter().zip(candidates) {
        step(&mut state, c, cands, cfg, &mut report);
    }
    Ok((state.freeze(), report))
}

/// Teacher-forced answer cross-entropy with the full graph as evidence.
pub fn stage1_loss(graph: &GraphState, question: &str, answer: &str, reasoner: &dyn Reasoner) -> Result<f64> {
    let prompt = compose_prompt(&serialize(graph.edges().iter().map(|e| &e.triple)), question);
    let tokens: Vec<String> = crate::chunker::tokenize(answer).into_iter().map(String::from).collect();
    let logprobs = reasoner.logprobs(&prompt, &tokens)?;
    if logprobs.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} log-probabilities for {} answer tokens",
            logprobs.len(),
            tokens.len()
        )));
    }
    Ok(-logprobs.iter().sum::<f64>())
}
