//! Core domain types: triples, edges, the capped graph state and build
//! configuration.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_LEN: usize = 1024;
pub const DEFAULT_OVERLAP: usize = 128;
pub const DEFAULT_PER_CHUNK_CAP: usize = 32;
pub const DEFAULT_CAPACITY: usize = 150;
pub const DEFAULT_FIELD_CAP: usize = 16;
pub const DEFAULT_BUDGET: usize = 30;

/// A `(head, relation, tail)` fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    /// Canonical form of all three fields, or `None` if any field normalizes
    /// to the empty string.
    pub fn canonical(&self) -> Option<Triple> {
        Some(Triple {
            head: canonicalize_entity(&self.head)?,
            relation: canonicalize_entity(&self.relation)?,
            tail: canonicalize_entity(&self.tail)?,
        })
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Lowercases, maps control characters to spaces, collapses whitespace and
/// strips leading/trailing punctuation. Returns `None` when nothing remains.
pub fn canonicalize_entity(raw: &str) -> Option<String> {
    let lowered: String = raw
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    if stripped.is_empty() {
        None
    } else {
        Some(stripped.to_string())
    }
}

/// Stable 64-bit identifier of a canonical triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FIELD_SEPARATOR: u8 = 0x1f;

pub(crate) fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// FNV-1a 64 over `head 0x1F relation 0x1F tail` of the canonical triple.
/// Fields that fail canonicalization are hashed as given.
pub fn edge_id(triple: &Triple) -> EdgeId {
    let canonical = triple.canonical();
    let t = canonical.as_ref().unwrap_or(triple);
    let mut h = fnv1a(FNV_OFFSET, t.head.as_bytes());
    h = fnv1a(h, &[FIELD_SEPARATOR]);
    h = fnv1a(h, t.relation.as_bytes());
    h = fnv1a(h, &[FIELD_SEPARATOR]);
    h = fnv1a(h, t.tail.as_bytes());
    EdgeId(h)
}

pub(crate) fn fnv1a_seeded(seed: u64, bytes: &[u8]) -> u64 {
    fnv1a(fnv1a(FNV_OFFSET, &seed.to_le_bytes()), bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub triple: Triple,
    pub id: EdgeId,
    pub occurrence_count: u64,
    pub first_chunk: usize,
    pub insertion_order: u64,
}

impl Edge {
    /// Priority used by capacity eviction; the smallest value is evicted first.
    pub fn retention_priority(&self) -> (u64, std::cmp::Reverse<u64>) {
        (self.occurrence_count, std::cmp::Reverse(self.insertion_order))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub chunk_len: usize,
    pub overlap: usize,
    pub per_chunk_cap: usize,
    pub capacity: usize,
    pub field_cap: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            chunk_len: DEFAULT_CHUNK_LEN,
            overlap: DEFAULT_OVERLAP,
            per_chunk_cap: DEFAULT_PER_CHUNK_CAP,
            capacity: DEFAULT_CAPACITY,
            field_cap: DEFAULT_FIELD_CAP,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.overlap >= self.chunk_len {
            return Err(Error::Config(format!(
                "overlap ({}) must be smaller than chunk length ({})",
                self.overlap, self.chunk_len
            )));
        }
        if self.per_chunk_cap == 0 {
            return Err(Error::Config("per-chunk cap must be at least 1".into()));
        }
        if self.capacity == 0 {
            return Err(Error::Config("global capacity must be at least 1".into()));
        }
        if self.field_cap == 0 {
            return Err(Error::Config("field cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_len - self.overlap
    }
}

/// The evolving capped edge set. Single writer while building; call
/// [`GraphState::freeze`] to share it read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    edges: Vec<Edge>,
    positions: HashMap<EdgeId, usize>,
    entity_index: BTreeMap<String, usize>,
    pub step: usize,
    pub capacity: usize,
    next_order: u64,
}

impl GraphState {
    pub fn new(capacity: usize) -> Self {
        GraphState {
            edges: Vec::new(),
            positions: HashMap::new(),
            entity_index: BTreeMap::new(),
            step: 0,
            capacity,
            next_order: 0,
        }
    }

    /// Rebuilds a state from persisted edges (already in insertion order).
    pub fn from_edges(edges: Vec<Edge>, capacity: usize, step: usize) -> Result<Self> {
        let next_order = edges.iter().map(|e| e.insertion_order + 1).max().unwrap_or(0);
        let mut state = GraphState {
            edges,
            positions: HashMap::new(),
            entity_index: BTreeMap::new(),
            step,
            capacity,
            next_order,
        };
        state.reindex();
        if state.positions.len() != state.edges.len() {
            return Err(Error::Parse("duplicate edge ids".into()));
        }
        if state.edges.len() > capacity {
            return Err(Error::Parse(format!(
                "{} edges exceed capacity {capacity}",
                state.edges.len()
            )));
        }
        Ok(state)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn entity_index(&self) -> &BTreeMap<String, usize> {
        &self.entity_index
    }

    pub fn position(&self, id: EdgeId) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn contains(&self, id: EdgeId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn freeze(self) -> FrozenGraph {
        FrozenGraph(Arc::new(self))
    }

    /// Adds one canonical triple or bumps its occurrence count. Returns `true`
    /// when a new edge was created.
    pub(crate) fn upsert(&mut self, triple: Triple, chunk: usize) -> bool {
        let id = edge_id(&triple);
        if let Some(&pos) = self.positions.get(&id) {
            self.edges[pos].occurrence_count += 1;
            return false;
        }
        for entity in [&triple.head, &triple.tail] {
            let next = self.entity_index.len();
            self.entity_index.entry(entity.clone()).or_insert(next);
        }
        self.positions.insert(id, self.edges.len());
        self.edges.push(Edge {
            triple,
            id,
            occurrence_count: 1,
            first_chunk: chunk,
            insertion_order: self.next_order,
        });
        self.next_order += 1;
        true
    }

    /// Keeps edges for which `keep` holds, preserving order; returns the
    /// removed edges.
    pub(crate) fn retain_edges(&mut self, mut keep: impl FnMut(&Edge) -> bool) -> Vec<Edge> {
        let (kept, removed): (Vec<_>, Vec<_>) = std::mem::take(&mut self.edges).into_iter().partition(|e| keep(e));
        self.edges = kept;
        if !removed.is_empty() {
            self.reindex();
        }
        removed
    }

    fn reindex(&mut self) {
        self.positions = self.edges.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        self.entity_index.clear();
        for e in &self.edges {
            for entity in [&e.triple.head, &e.triple.tail] {
                let next = self.entity_index.len();
                self.entity_index.entry(entity.clone()).or_insert(next);
            }
        }
    }
}

/// Immutable, cheaply clonable view of a finished graph.
#[derive(Debug, Clone)]
pub struct FrozenGraph(Arc<GraphState>);

impl Deref for FrozenGraph {
    type Target = GraphState;

    fn deref(&self) -> &GraphState {
        &self.0
    }
}

impl FrozenGraph {
    pub fn empty(capacity: usize) -> Self {
        GraphState::new(capacity).freeze()
    }
}

/// One question-answering example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_edge_ids: Option<Vec<EdgeId>>,
}

impl QaInstance {
    pub fn validate(&self) -> Result<()> {
        if self.context.trim().is_empty() {
            return Err(Error::Parse(format!("instance {}: empty context", self.id)));
        }
        if self.question.trim().is_empty() {
            return Err(Error::Parse(format!("instance {}: empty question", self.id)));
        }
        if self.answers.is_empty() {
            return Err(Error::Parse(format!("instance {}: no answers", self.id)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize_entity("  The Eiffel Tower ").as_deref(), Some("the eiffel tower"));
        assert_eq!(canonicalize_entity("Paris").as_deref(), Some("paris"));
        assert_eq!(canonicalize_entity("Paris,"), canonicalize_entity("paris"));
        assert_eq!(canonicalize_entity(" ,.; "), None);
        assert_eq!(canonicalize_entity("a\nb\x1fc").as_deref(), Some("a b c"));
    }

    #[test]
    fn edge_id_examples() {
        let abr = Triple::new("A", "r", "B");
        assert_eq!(edge_id(&abr), edge_id(&abr.clone()));
        assert_ne!(edge_id(&abr), edge_id(&Triple::new("B", "r", "A")));
        assert_ne!(
            edge_id(&Triple::new("a b", "r", "c")),
            edge_id(&Triple::new("a", "r b", "c"))
        );
        assert_eq!(edge_id(&Triple::new("Paris,", "R", "x")), edge_id(&Triple::new("paris", "r", "x")));
    }

    #[test]
    fn edge_id_matches_reference_fnv() {
        // FNV-1a 64 of "a\x1fb\x1fc" computed independently of fnv1a()
        let mut h: u64 = 0xcbf29ce484222325;
        for b in b"a\x1fb\x1fc" {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(edge_id(&Triple::new("a", "b", "c")).0, h);
    }

    #[test]
    fn edge_ids_collision_free_on_large_universe() {
        let mut seen = HashMap::new();
        for i in 0..100_000u32 {
            let t = Triple::new(format!("e{}", i % 317), format!("r{}", i % 7), format!("e{}", i / 7));
            let c = t.canonical().unwrap();
            if let Some(prev) = seen.insert(edge_id(&c), c.clone()) {
                assert_eq!(prev, c, "collision");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(BuildConfig::default().validate().is_ok());
        let bad = BuildConfig { overlap: 1024, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BuildConfig { capacity: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn entity_index_tracks_edges() {
        let mut g = GraphState::new(10);
        g.upsert(Triple::new("a", "r", "b"), 1);
        g.upsert(Triple::new("b", "r", "c"), 1);
        assert_eq!(g.entity_index().len(), 3);
        g.retain_edges(|e| e.triple.head != "a");
        let names: Vec<_> = g.entity_index().keys().cloned().collect();
        assert_eq!(names, vec!["b", "c"]);
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(raw in "\\PC{0,24}") {
            if let Some(once) = canonicalize_entity(&raw) {
                prop_assert_eq!(canonicalize_entity(&once), Some(once.clone()));
            }
        }
    }
}
