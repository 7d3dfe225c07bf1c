//! On-disk formats: memory files, JSONL datasets, parameter checkpoints and
//! DOT export. Every write goes to a temporary file in the target directory
//! and is renamed into place.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{EmbedderParams, EmbeddingMatrix, RetrieverParams, Subgraph};
use crate::model::{edge_id, BuildConfig, Edge, GraphState, QaInstance, Triple};

pub const MEMORY_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EMBEDDING_ENCODING: &str = "f64le-base64";

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub h: String,
    pub r: String,
    pub t: String,
    pub occurrence_count: u64,
    pub first_chunk: usize,
    pub insertion_order: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub d: usize,
    pub encoding: String,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFile {
    pub version: u32,
    pub config: BuildConfig,
    #[serde(default)]
    pub step: usize,
    pub edges: Vec<EdgeRecord>,
    pub embeddings: EmbeddingRecord,
}

fn encode_row(row: impl IntoIterator<Item = f64>) -> String {
    let bytes: Vec<u8> = row.into_iter().flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

fn decode_row(s: &str, d: usize) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64 row: {e}"))?;
    if bytes.len() != d * 8 {
        return Err(format!("row has {} bytes, expected {}", bytes.len(), d * 8));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl MemoryFile {
    pub fn from_parts(graph: &GraphState, embeddings: &EmbeddingMatrix, config: &BuildConfig) -> Result<Self> {
        if embeddings.len() != graph.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} edges",
                embeddings.len(),
                graph.len()
            )));
        }
        Ok(MemoryFile {
            version: MEMORY_VERSION,
            config: *config,
            step: graph.step,
            edges: graph
                .edges()
                .iter()
                .map(|e| EdgeRecord {
                    h: e.triple.head.clone(),
                    r: e.triple.relation.clone(),
                    t: e.triple.tail.clone(),
                    occurrence_count: e.occurrence_count,
                    first_chunk: e.first_chunk,
                    insertion_order: e.insertion_order,
                })
                .collect(),
            embeddings: EmbeddingRecord {
                d: embeddings.dim(),
                encoding: EMBEDDING_ENCODING.into(),
                rows: embeddings.rows().outer_iter().map(|r| encode_row(r.iter().copied())).collect(),
            },
        })
    }

    /// Validates and converts to in-memory state.
    pub fn into_parts(self) -> Result<(GraphState, EmbeddingMatrix, BuildConfig), String> {
        if self.version != MEMORY_VERSION {
            return Err(format!("unsupported version {}", self.version));
        }
        if self.embeddings.encoding != EMBEDDING_ENCODING {
            return Err(format!("unsupported encoding {:?}", self.embeddings.encoding));
        }
        if self.embeddings.rows.len() != self.edges.len() {
            return Err(format!(
                "{} embedding rows for {} edges",
                self.embeddings.rows.len(),
                self.edges.len()
            ));
        }
        self.config.validate().map_err(|e| e.to_string())?;
        let d = self.embeddings.d;
        if d == 0 && !self.edges.is_empty() {
            return Err("embedding dimension is zero".into());
        }
        let mut flat = Vec::with_capacity(self.edges.len() * d);
        for row in &self.embeddings.rows {
            flat.extend(decode_row(row, d)?);
        }
        if self.edges.windows(2).any(|w| w[0].insertion_order >= w[1].insertion_order) {
            return Err("edges are not in insertion order".into());
        }
        let edges = self
            .edges
            .into_iter()
            .map(|r| {
                let triple = Triple::new(r.h, r.r, r.t);
                Edge {
                    id: edge_id(&triple),
                    triple,
                    occurrence_count: r.occurrence_count,
                    first_chunk: r.first_chunk,
                    insertion_order: r.insertion_order,
                }
            })
            .collect::<Vec<_>>();
        let rows = Array2::from_shape_vec((edges.len(), d), flat).map_err(|e| e.to_string())?;
        let graph = GraphState::from_edges(edges, self.config.capacity, self.step).map_err(|e| e.to_string())?;
        Ok((graph, EmbeddingMatrix::new(rows), self.config))
    }
}

pub fn memory_to_bytes(graph: &GraphState, embeddings: &EmbeddingMatrix, config: &BuildConfig) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&MemoryFile::from_parts(graph, embeddings, config)?)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save_memory(path: &Path, graph: &GraphState, embeddings: &EmbeddingMatrix, config: &BuildConfig) -> Result<()> {
    write_atomic(path, &memory_to_bytes(graph, embeddings, config)?)
}

pub fn load_memory(path: &Path) -> Result<(GraphState, EmbeddingMatrix, BuildConfig)> {
    let bytes = std::fs::read(path).map_err(|e| load_error(path, e.to_string()))?;
    let file: MemoryFile = serde_json::from_slice(&bytes).map_err(|e| load_error(path, e.to_string()))?;
    file.into_parts().map_err(|reason| load_error(path, reason))
}

pub fn read_dataset_from(reader: impl Read) -> Result<Vec<QaInstance>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: QaInstance =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<QaInstance>> {
    let file = std::fs::File::open(path).map_err(|e| load_error(path, e.to_string()))?;
    read_dataset_from(file).map_err(|e| match e {
        Error::Parse(reason) => load_error(path, reason),
        other => other,
    })
}

pub fn dataset_to_string(instances: &[QaInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, instances: &[QaInstance]) -> Result<()> {
    write_atomic(path, dataset_to_string(instances)?.as_bytes())
}

/// JSON header line of a checkpoint; the tensors follow as raw little-endian
/// doubles, row-major, in the listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub d: usize,
    pub tau: f64,
    pub k: usize,
    pub hash_seed: u64,
    pub tensors: Vec<String>,
}

const TENSOR_NAMES: [&str; 3] = ["bilinear", "query_map", "edge_map"];

pub fn checkpoint_to_bytes(ep: &EmbedderParams, rp: &RetrieverParams) -> Result<Vec<u8>> {
    ep.validate()?;
    rp.validate()?;
    if ep.dim() != rp.dim() {
        return Err(Error::Shape(format!("embedder d={} but retriever d={}", ep.dim(), rp.dim())));
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        d: ep.dim(),
        tau: rp.temperature,
        k: rp.budget,
        hash_seed: ep.hash_seed,
        tensors: TENSOR_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for m in [&rp.bilinear, &rp.query_map, &ep.edge_map] {
        for x in m.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EmbedderParams, RetrieverParams), String> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| e.to_string())?;
    if header.version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {}", header.version));
    }
    if header.tensors != TENSOR_NAMES {
        return Err(format!("unexpected tensor list {:?}", header.tensors));
    }
    let d = header.d;
    let body = &bytes[nl + 1..];
    let want = 3 * d * d * 8;
    if body.len() != want {
        return Err(format!("tensor payload is {} bytes, expected {want}", body.len()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = |i: usize| Array2::from_shape_vec((d, d), values[i * d * d..(i + 1) * d * d].to_vec()).expect("sized");
    let rp = RetrieverParams {
        bilinear: tensor(0),
        query_map: tensor(1),
        temperature: header.tau,
        budget: header.k,
    };
    let ep = EmbedderParams { edge_map: tensor(2), hash_seed: header.hash_seed };
    rp.validate().map_err(|e| e.to_string())?;
    ep.validate().map_err(|e| e.to_string())?;
    Ok((ep, rp))
}

pub fn save_checkpoint(path: &Path, ep: &EmbedderParams, rp: &RetrieverParams) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ep, rp)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbedderParams, RetrieverParams)> {
    let bytes = std::fs::read(path).map_err(|e| load_error(path, e.to_string()))?;
    checkpoint_from_bytes(&bytes).map_err(|reason| load_error(path, reason))
}

fn dot_quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// DOT digraph with one node per entity and one arc per edge labeled
/// `relation (score)`.
pub fn to_dot(subgraph: &Subgraph) -> String {
    let mut out = String::from("digraph memory {\n");
    let mut seen = std::collections::BTreeSet::new();
    for e in &subgraph.edges {
        for entity in [&e.triple.head, &e.triple.tail] {
            if seen.insert(entity.as_str()) {
                let _ = writeln!(out, "  {};", dot_quote(entity));
            }
        }
    }
    for (e, s) in subgraph.edges.iter().zip(&subgraph.scores) {
        let label = format!("{} ({s:.4})", e.triple.relation);
        let _ = writeln!(
            out,
            "  {} -> {} [label={}];",
            dot_quote(&e.triple.head),
            dot_quote(&e.triple.tail),
            dot_quote(&label)
        );
    }
    out.push_str("}\n");
    out
}

pub fn export_dot(subgraph: &Subgraph, path: &Path) -> Result<()> {
    write_atomic(path, to_dot(subgraph).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::embed_edges;

    fn graph(n: usize) -> GraphState {
        let mut g = GraphState::new(n.max(1));
        for i in 0..n {
            g.upsert(Triple::new(format!("e{i}"), "knows", format!("e{}", i + 1)), i / 10 + 1);
        }
        g
    }

    #[test]
    fn memory_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let cfg = BuildConfig::default();
        let g = graph(150);
        let u = embed_edges(&g, &EmbedderParams::default());
        save_memory(&path, &g, &u, &cfg).unwrap();
        let (g2, u2, cfg2) = load_memory(&path).unwrap();
        assert_eq!(g2.edges(), g.edges());
        assert_eq!(cfg2, cfg);
        let bits = |m: &EmbeddingMatrix| m.rows().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&u2), bits(&u));
        let again = memory_to_bytes(&g2, &u2, &cfg2).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn empty_memory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let g = GraphState::new(5);
        let u = embed_edges(&g, &EmbedderParams::default());
        save_memory(&path, &g, &u, &BuildConfig::default()).unwrap();
        let (g2, u2, _) = load_memory(&path).unwrap();
        assert!(g2.is_empty());
        assert_eq!(u2.len(), 0);
    }

    #[test]
    fn truncated_or_mismatched_files_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let g = graph(3);
        let u = embed_edges(&g, &EmbedderParams::default());
        let bytes = memory_to_bytes(&g, &u, &BuildConfig::default()).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_memory(&path), Err(Error::Load { .. })));

        let mut file: MemoryFile = serde_json::from_slice(&bytes).unwrap();
        file.version = 2;
        std::fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
        assert!(matches!(load_memory(&path), Err(Error::Load { .. })));

        let mut file: MemoryFile = serde_json::from_slice(&bytes).unwrap();
        file.embeddings.rows.pop();
        std::fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
        assert!(matches!(load_memory(&path), Err(Error::Load { .. })));

        let mut file: MemoryFile = serde_json::from_slice(&bytes).unwrap();
        file.embeddings.d = 32;
        std::fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
        assert!(matches!(load_memory(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ep = EmbedderParams::identity(4, 99);
        ep.edge_map[[0, 1]] = 0.25;
        let mut rp = RetrieverParams::identity(4).with_budget(3).with_temperature(0.7);
        rp.bilinear[[2, 3]] = -1.5;
        rp.query_map[[1, 0]] = f64::MIN_POSITIVE;
        let bytes = checkpoint_to_bytes(&ep, &rp).unwrap();
        let (ep2, rp2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ep2, ep);
        assert_eq!(rp2, rp);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let inst = QaInstance {
            id: "a".into(),
            context: "x y.".into(),
            question: "q?".into(),
            answers: vec!["y".into()],
            gold_edge_ids: None,
        };
        let text = dataset_to_string(&[inst.clone(), inst.clone()]).unwrap();
        assert!(!text.contains("gold_edge_ids"));
        assert_eq!(read_dataset_from(text.as_bytes()).unwrap(), vec![inst.clone(), inst]);
        assert!(read_dataset_from("{\"id\":\"a\"}\n".as_bytes()).is_err());
    }

    #[test]
    fn dot_shapes() {
        let mut g = GraphState::new(5);
        g.upsert(Triple::new("a", "r", "b"), 1);
        g.upsert(Triple::new("b", "s", "c"), 1);
        let sub = Subgraph::from_indices(&g, vec![0, 1], vec![1.0, 0.5]);
        let dot = to_dot(&sub);
        assert_eq!(dot.matches(" -> ").count(), 2);
        assert_eq!(dot.lines().filter(|l| l.trim_end().ends_with(';') && !l.contains("->")).count(), 3);
        assert_eq!(to_dot(&Subgraph::empty()), "digraph memory {\n}\n");
    }
}
