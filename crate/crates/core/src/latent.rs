//! Latent view of memory and budgeted retrieval.
//!
//! Edges and questions are embedded by signed feature hashing followed by a
//! trainable linear map:
//!
//! ```text
//! u_i = A · norm(hash(h:…, r:…, t:…))      v = Q · norm(hash(q:…))
//! s_i = vᵀ W u_i
//! ```
//!
//! Retrieval keeps the `k` highest scores (ties to the lower index). Training
//! uses the temperature softmax `α = softmax(s / τ)` in place of the hard
//! selection (straight-through): the forward path reports the hard top-k,
//! gradients flow only through `α`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::chunker::tokenize;
use crate::error::{Error, Result};
use crate::model::{fnv1a_seeded, Edge, GraphState, Triple, DEFAULT_BUDGET};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_HASH_SEED: u64 = 0x005e_ed0f_9a4d;
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Builder-side embedding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub edge_map: Array2<f64>,
    pub hash_seed: u64,
}

impl EmbedderParams {
    pub fn identity(dim: usize, hash_seed: u64) -> Self {
        EmbedderParams {
            edge_map: Array2::eye(dim),
            hash_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.edge_map.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.edge_map.dim();
        if r < 2 || r != c {
            return Err(Error::Shape(format!("edge map must be square with d >= 2, got {r}x{c}")));
        }
        if self.edge_map.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("edge map has non-finite entries".into()));
        }
        Ok(())
    }
}

impl Default for EmbedderParams {
    fn default() -> Self {
        EmbedderParams::identity(DEFAULT_DIM, DEFAULT_HASH_SEED)
    }
}

/// Retriever-side parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    pub bilinear: Array2<f64>,
    pub query_map: Array2<f64>,
    pub temperature: f64,
    pub budget: usize,
}

impl RetrieverParams {
    pub fn identity(dim: usize) -> Self {
        RetrieverParams {
            bilinear: Array2::eye(dim),
            query_map: Array2::eye(dim),
            temperature: DEFAULT_TEMPERATURE,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn dim(&self) -> usize {
        self.bilinear.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.bilinear.nrows();
        if self.bilinear.dim() != (d, d) || self.query_map.dim() != (d, d) {
            return Err(Error::Shape("bilinear and query maps must be square and equal-sized".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for RetrieverParams {
    fn default() -> Self {
        RetrieverParams::identity(DEFAULT_DIM)
    }
}

fn l2_normalize(mut x: Array1<f64>) -> Array1<f64> {
    let norm = x.dot(&x).sqrt();
    if norm > 0.0 {
        x /= norm;
    }
    x
}

/// Adds `±1` for every token into bucket `hash mod d`; the sign is the top
/// hash bit.
fn hash_into(acc: &mut Array1<f64>, prefix: &str, text: &str, seed: u64) {
    let dim = acc.len() as u64;
    let mut key = String::new();
    for tok in tokenize(&text.to_lowercase()) {
        key.clear();
        key.push_str(prefix);
        key.push_str(tok);
        let h = fnv1a_seeded(seed, key.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % dim) as usize] += sign;
    }
}

/// Unit-norm hashed features of a triple (zero if every token cancels).
pub fn triple_features(t: &Triple, dim: usize, seed: u64) -> Array1<f64> {
    let mut acc = Array1::zeros(dim);
    hash_into(&mut acc, "h:", &t.head, seed);
    hash_into(&mut acc, "r:", &t.relation, seed);
    hash_into(&mut acc, "t:", &t.tail, seed);
    l2_normalize(acc)
}

/// Unit-norm hashed bag of tokens of `text`, all under one `prefix`.
pub fn bag_features(text: &str, prefix: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut acc = Array1::zeros(dim);
    hash_into(&mut acc, prefix, text, seed);
    l2_normalize(acc)
}

pub fn query_features(question: &str, dim: usize, seed: u64) -> Result<Array1<f64>> {
    if tokenize(question).is_empty() {
        return Err(Error::EmptyQuestion);
    }
    Ok(bag_features(question, "q:", dim, seed))
}

pub fn embed_edge(edge: &Edge, params: &EmbedderParams) -> Array1<f64> {
    params.edge_map.dot(&triple_features(&edge.triple, params.dim(), params.hash_seed))
}

/// Pre-map feature rows for every edge, `|E| x d`.
pub fn edge_feature_matrix(edges: &[Edge], dim: usize, seed: u64) -> Array2<f64> {
    let mut m = Array2::zeros((edges.len(), dim));
    for (mut row, e) in m.rows_mut().into_iter().zip(edges) {
        row.assign(&triple_features(&e.triple, dim, seed));
    }
    m
}

/// `U`: one embedding row per edge, in edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>) -> Self {
        EmbeddingMatrix { rows }
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

pub fn embed_edges(graph: &GraphState, params: &EmbedderParams) -> EmbeddingMatrix {
    let features = edge_feature_matrix(graph.edges(), params.dim(), params.hash_seed);
    EmbeddingMatrix::new(features.dot(&params.edge_map.t()))
}

pub fn encode_query(question: &str, rp: &RetrieverParams, ep: &EmbedderParams) -> Result<Array1<f64>> {
    let f = query_features(question, ep.dim(), ep.hash_seed)?;
    if rp.query_map.ncols() != f.len() {
        return Err(Error::Shape(format!(
            "query map is {:?} but embedder dimension is {}",
            rp.query_map.dim(),
            f.len()
        )));
    }
    Ok(rp.query_map.dot(&f))
}

/// `s_i = vᵀ W u_i` for every row of `u`.
pub fn score(v: ArrayView1<'_, f64>, w: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let d = v.len();
    if w.dim() != (d, d) || (u.nrows() > 0 && u.ncols() != d) {
        return Err(Error::Shape(format!(
            "v has {d} entries, W is {:?}, U is {:?}",
            w.dim(),
            u.dim()
        )));
    }
    if u.nrows() == 0 {
        return Ok(Vec::new());
    }
    let wv = w.t().dot(&v);
    Ok(u.dot(&wv).to_vec())
}

/// Indices of the `k` largest scores, largest first, ties to the lower index.
/// All indices when `k >= scores.len()`.
pub fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

pub fn topk_mask(scores: &[f64], k: usize) -> Vec<u8> {
    let mut mask = vec![0; scores.len()];
    for i in topk(scores, k) {
        mask[i] = 1;
    }
    mask
}

/// Temperature softmax with max subtraction.
pub fn relax(scores: &[f64], temperature: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Hard mask for the forward path, soft weights for the backward path.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRelaxation {
    pub mask: Vec<u8>,
    pub alpha: Vec<f64>,
    pub scores: Vec<f64>,
}

impl SelectionRelaxation {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &z)| z == 1).map(|(i, _)| i)
    }
}

pub fn ste_select(scores: &[f64], k: usize, temperature: f64) -> SelectionRelaxation {
    SelectionRelaxation {
        mask: topk_mask(scores, k),
        alpha: relax(scores, temperature),
        scores: scores.to_vec(),
    }
}

/// The externalized evidence for one question: positions into the graph's
/// edge list, ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub indices: Vec<usize>,
    pub edges: Vec<Edge>,
    pub scores: Vec<f64>,
}

impl Subgraph {
    pub fn empty() -> Self {
        Subgraph { indices: Vec::new(), edges: Vec::new(), scores: Vec::new() }
    }

    pub fn from_indices(graph: &GraphState, indices: Vec<usize>, scores: Vec<f64>) -> Self {
        let edges = indices.iter().map(|&i| graph.edges()[i].clone()).collect();
        Subgraph { indices, edges, scores }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.edges.iter().map(|e| &e.triple)
    }
}

pub fn retrieve(
    graph: &GraphState,
    embeddings: &EmbeddingMatrix,
    question: &str,
    rp: &RetrieverParams,
    ep: &EmbedderParams,
) -> Result<Subgraph> {
    if embeddings.len() != graph.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} edges",
            embeddings.len(),
            graph.len()
        )));
    }
    if graph.is_empty() {
        return Ok(Subgraph::empty());
    }
    let v = encode_query(question, rp, ep)?;
    let scores = score(v.view(), rp.bilinear.view(), embeddings.rows())?;
    let indices = topk(&scores, rp.budget);
    let selected = indices.iter().map(|&i| scores[i]).collect();
    Ok(Subgraph::from_indices(graph, indices, selected))
}

/// Cached hashed inputs of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures {
    pub query: Array1<f64>,
    /// Pre-map edge features, `|E| x d`.
    pub edges: Array2<f64>,
    /// Positions of gold edges present in the graph.
    pub gold: Vec<usize>,
    /// Number of gold edges the question depends on, present or not.
    pub gold_total: usize,
}

/// `−log(Σ_{i∈gold} α_i + ε)`.
pub fn surrogate_loss(alpha: &[f64], gold: &[usize], epsilon: f64) -> f64 {
    -(gold.iter().map(|&i| alpha[i]).sum::<f64>() + epsilon).ln()
}

/// `∂L/∂s` of the surrogate loss through the softmax Jacobian.
pub fn score_gradient(alpha: &[f64], gold: &[usize], temperature: f64, epsilon: f64) -> Vec<f64> {
    let mass: f64 = gold.iter().map(|&i| alpha[i]).sum();
    let mut is_gold = vec![0.0; alpha.len()];
    for &g in gold {
        is_gold[g] = 1.0;
    }
    let scale = -1.0 / (temperature * (mass + epsilon));
    alpha
        .iter()
        .zip(&is_gold)
        .map(|(a, g)| scale * a * (g - mass))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub bilinear: Array2<f64>,
    pub query_map: Array2<f64>,
    pub edge_map: Array2<f64>,
    pub loss: f64,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            bilinear: Array2::zeros((dim, dim)),
            query_map: Array2::zeros((dim, dim)),
            edge_map: Array2::zeros((dim, dim)),
            loss: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && [&self.bilinear, &self.query_map, &self.edge_map]
                .iter()
                .all(|m| m.iter().all(|x| x.is_finite()))
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        self.bilinear.scaled_add(scale, &other.bilinear);
        self.query_map.scaled_add(scale, &other.query_map);
        self.edge_map.scaled_add(scale, &other.edge_map);
        self.loss += scale * other.loss;
    }
}

/// Forward quantities shared by scoring and differentiation.
pub struct Forward {
    pub query: Array1<f64>,
    pub embeddings: Array2<f64>,
    pub scores: Vec<f64>,
}

pub fn forward(x: &InstanceFeatures, ep: &EmbedderParams, rp: &RetrieverParams) -> Forward {
    let query = rp.query_map.dot(&x.query);
    let embeddings = x.edges.dot(&ep.edge_map.t());
    let scores = if embeddings.nrows() == 0 {
        Vec::new()
    } else {
        embeddings.dot(&rp.bilinear.t().dot(&query)).to_vec()
    };
    Forward { query, embeddings, scores }
}

/// Gradients of the surrogate loss given soft weights `alpha` from
/// [`forward`]'s scores. Only `alpha` enters; the hard mask never does.
pub fn gradients_from_alpha(
    x: &InstanceFeatures,
    fwd: &Forward,
    alpha: &[f64],
    rp: &RetrieverParams,
    epsilon: f64,
) -> Gradients {
    let delta = Array1::from(score_gradient(alpha, &x.gold, rp.temperature, epsilon));
    let wv = rp.bilinear.t().dot(&fwd.query);
    // Σ_i δ_i u_i and Σ_i δ_i g_i
    let u_delta = fwd.embeddings.t().dot(&delta);
    let g_delta = x.edges.t().dot(&delta);
    let outer = |a: &Array1<f64>, b: &Array1<f64>| {
        a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
    };
    let grad_v = rp.bilinear.dot(&u_delta);
    Gradients {
        bilinear: outer(&fwd.query, &u_delta),
        query_map: outer(&grad_v, &x.query),
        edge_map: outer(&wv, &g_delta),
        loss: surrogate_loss(alpha, &x.gold, epsilon),
    }
}

/// Analytic gradients of `−log(Σ_gold α + ε)` with respect to `W`, `Q` and `A`.
pub fn grad_surrogate(x: &InstanceFeatures, ep: &EmbedderParams, rp: &RetrieverParams, epsilon: f64) -> Gradients {
    let fwd = forward(x, ep, rp);
    let alpha = relax(&fwd.scores, rp.temperature);
    gradients_from_alpha(x, &fwd, &alpha, rp, epsilon)
}

/// Mean gradients over a batch, reduced in batch order.
pub fn batch_gradients(
    batch: &[&InstanceFeatures],
    ep: &EmbedderParams,
    rp: &RetrieverParams,
    epsilon: f64,
) -> Gradients {
    let mut total = Gradients::zeros(ep.dim());
    if batch.is_empty() {
        return total;
    }
    let scale = 1.0 / batch.len() as f64;
    for x in batch {
        total.add_scaled(&grad_surrogate(x, ep, rp, epsilon), scale);
    }
    total
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecallStats {
    pub recall: f64,
    /// Fraction of instances whose gold edges were all selected.
    pub full_recall: f64,
}

/// Gold-edge recall@k of the hard forward selection.
pub fn recall_at_k(data: &[InstanceFeatures], ep: &EmbedderParams, rp: &RetrieverParams) -> RecallStats {
    if data.is_empty() {
        return RecallStats { recall: 0.0, full_recall: 0.0 };
    }
    let mut recall = 0.0;
    let mut full = 0usize;
    for x in data {
        let fwd = forward(x, ep, rp);
        let mask = topk_mask(&fwd.scores, rp.budget);
        let hit = x.gold.iter().filter(|&&g| mask[g] == 1).count();
        let total = x.gold_total.max(x.gold.len()).max(1);
        recall += hit as f64 / total as f64;
        if hit == total {
            full += 1;
        }
    }
    RecallStats {
        recall: recall / data.len() as f64,
        full_recall: full as f64 / data.len() as f64,
    }
}
