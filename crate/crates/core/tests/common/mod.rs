//! Independent test-side oracles shared by the integration tests and the
//! acceptance suite. Nothing here calls the code path it checks.

#![allow(dead_code)]

use std::cmp::Ordering;

use gmem_core::chunker::token_count;
use gmem_core::latent::{grad_surrogate, relax, surrogate_loss, EmbedderParams, InstanceFeatures, RetrieverParams};
use gmem_core::{BuildConfig, Triple};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- builder

/// Canonical key computed without the library: control → space, lowercase,
/// collapse whitespace, trim ASCII punctuation and whitespace.
pub fn oracle_canon(s: &str) -> Option<String> {
    let spaced: String = s.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    let words: Vec<String> = spaced.to_lowercase().split_whitespace().map(String::from).collect();
    let joined = words.join(" ");
    let trimmed = joined.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

pub type Key = (String, String, String);

fn canon_key(t: &Triple) -> Option<Key> {
    Some((oracle_canon(&t.head)?, oracle_canon(&t.relation)?, oracle_canon(&t.tail)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleEdge {
    pub key: Key,
    pub count: u64,
    pub first_chunk: usize,
    pub order: u64,
}

/// Reference model of one streaming build: per chunk, take the first
/// `per_chunk_cap` distinct candidates, merge, drop invalid edges, then evict
/// the lowest `(count, newest-first)` edges down to capacity.
#[derive(Debug, Default)]
pub struct OracleGraph {
    pub edges: Vec<OracleEdge>,
    next_order: u64,
    /// Distinct candidates consumed by the last step.
    pub last_consumed: usize,
}

impl OracleGraph {
    pub fn step(&mut self, chunk: usize, candidates: &[Triple], cfg: &BuildConfig) {
        let mut slots: Vec<Key> = Vec::new();
        let mut kept = Vec::new();
        for t in candidates {
            let slot = canon_key(t).unwrap_or_else(|| (t.head.clone(), t.relation.clone(), t.tail.clone()));
            if slots.contains(&slot) || slots.len() < cfg.per_chunk_cap {
                if !slots.contains(&slot) {
                    slots.push(slot);
                }
                kept.push(t);
            }
        }
        self.last_consumed = slots.len();
        for t in kept {
            let Some(key) = canon_key(t) else { continue };
            if let Some(e) = self.edges.iter_mut().find(|e| e.key == key) {
                e.count += 1;
            } else {
                self.edges.push(OracleEdge { key, count: 1, first_chunk: chunk, order: self.next_order });
                self.next_order += 1;
            }
        }
        let valid = |k: &Key| {
            [&k.0, &k.1, &k.2].iter().all(|f| token_count(f) <= cfg.field_cap)
                && k.1.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == ' ')
        };
        self.edges.retain(|e| valid(&e.key));
        if self.edges.len() > cfg.capacity {
            let mut ranked = self.edges.clone();
            ranked.sort_by(|a, b| a.count.cmp(&b.count).then(b.order.cmp(&a.order)));
            let excess = self.edges.len() - cfg.capacity;
            let evict: Vec<Key> = ranked[..excess].iter().map(|e| e.key.clone()).collect();
            self.edges.retain(|e| !evict.contains(&e.key));
        }
    }
}

/// Candidate streams with duplicates, casing/whitespace variants, and the
/// three kinds of invalid triple.
pub fn random_candidate(rng: &mut impl Rng) -> Triple {
    const ENTITIES: [&str; 12] = ["ann", "bo", "cy", "dee", "eli", "fay", "gus", "hal", "ivy", "jo", "kai", "lu"];
    const RELATIONS: [&str; 5] = ["knows", "works_for", "lives in", "owns", "likes"];
    let pick = |rng: &mut dyn RngCore, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
    let mut t = Triple::new(pick(rng, &ENTITIES), pick(rng, &RELATIONS), pick(rng, &ENTITIES));
    match rng.random_range(0..20) {
        0 => t.head = "  ".into(),
        1 => t.tail = "!!".into(),
        2 => t.relation = "works-for".into(),
        3 => t.head = vec!["w"; 17].join(" "),
        4 => t.head = format!(" {}. ", t.head.to_uppercase()),
        5 => t.relation = format!("{}\t", t.relation.to_uppercase()),
        _ => {}
    }
    t
}

// ---------------------------------------------------------------- latent

/// Full sort by descending score, ascending index on ties; first `k`.
pub fn topk_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Surrogate loss computed directly from parameters with naive loops.
pub fn naive_loss(x: &InstanceFeatures, ep: &EmbedderParams, rp: &RetrieverParams, eps: f64) -> f64 {
    let d = ep.dim();
    let v: Vec<f64> = (0..d).map(|i| (0..d).map(|j| rp.query_map[[i, j]] * x.query[j]).sum()).collect();
    let scores: Vec<f64> = (0..x.edges.nrows())
        .map(|e| {
            let u: Vec<f64> = (0..d).map(|i| (0..d).map(|j| ep.edge_map[[i, j]] * x.edges[[e, j]]).sum()).collect();
            (0..d).map(|i| (0..d).map(|j| v[i] * rp.bilinear[[i, j]] * u[j]).sum::<f64>()).sum()
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / rp.temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mass: f64 = x.gold.iter().map(|&g| exps[g] / z).sum();
    -(mass + eps).ln()
}

pub fn random_matrix(rng: &mut impl Rng, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |_| rng.random_range(-scale..scale))
}

fn unit(rng: &mut impl Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn random_instance(rng: &mut impl Rng, d: usize, n_edges: usize) -> (InstanceFeatures, EmbedderParams, RetrieverParams) {
    let mut edges = Array2::zeros((n_edges, d));
    for mut row in edges.rows_mut() {
        row.assign(&unit(rng, d));
    }
    let n_gold = rng.random_range(1..=3);
    let gold = rand::seq::index::sample(rng, n_edges, n_gold).into_vec();
    let x = InstanceFeatures { query: unit(rng, d), edges, gold, gold_total: n_gold };
    let eye = Array2::<f64>::eye(d);
    let ep = EmbedderParams { edge_map: &eye + &random_matrix(rng, d, 0.5), hash_seed: 1 };
    let rp = RetrieverParams {
        bilinear: &eye + &random_matrix(rng, d, 0.5),
        query_map: &eye + &random_matrix(rng, d, 0.5),
        temperature: rng.random_range(0.3..1.5),
        budget: 4,
    };
    (x, ep, rp)
}

/// Largest elementwise relative error between analytic gradients and central
/// differences of [`naive_loss`] over W, Q and A.
pub fn gradient_check(x: &InstanceFeatures, ep: &EmbedderParams, rp: &RetrieverParams, h: f64) -> f64 {
    let eps = 1e-9;
    let g = grad_surrogate(x, ep, rp, eps);
    let d = ep.dim();
    let mut worst: f64 = 0.0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    for i in 0..d {
        for j in 0..d {
            let (mut rp_p, mut rp_m) = (rp.clone(), rp.clone());
            rp_p.bilinear[[i, j]] += h;
            rp_m.bilinear[[i, j]] -= h;
            let n = (naive_loss(x, ep, &rp_p, eps) - naive_loss(x, ep, &rp_m, eps)) / (2.0 * h);
            worst = worst.max(rel(g.bilinear[[i, j]], n));

            let (mut rp_p, mut rp_m) = (rp.clone(), rp.clone());
            rp_p.query_map[[i, j]] += h;
            rp_m.query_map[[i, j]] -= h;
            let n = (naive_loss(x, ep, &rp_p, eps) - naive_loss(x, ep, &rp_m, eps)) / (2.0 * h);
            worst = worst.max(rel(g.query_map[[i, j]], n));

            let (mut ep_p, mut ep_m) = (ep.clone(), ep.clone());
            ep_p.edge_map[[i, j]] += h;
            ep_m.edge_map[[i, j]] -= h;
            let n = (naive_loss(x, &ep_p, rp, eps) - naive_loss(x, &ep_m, rp, eps)) / (2.0 * h);
            worst = worst.max(rel(g.edge_map[[i, j]], n));
        }
    }
    worst
}

/// Softmax mass, shift invariance of the score gradient and low-temperature
/// concentration on one random vector. Returns a failure description.
pub fn softmax_properties(rng: &mut impl Rng) -> Result<(), String> {
    let n = rng.random_range(1..=64);
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let tau = rng.random_range(0.05..2.0);
    let alpha = relax(&s, tau);
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(format!("Σα = {sum:.17}"));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err("non-positive α".into());
    }
    let c = rng.random_range(-100.0..100.0);
    let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
    let alpha_shift = relax(&shifted, tau);
    let gold = vec![rng.random_range(0..n)];
    let g1 = gmem_core::latent::score_gradient(&alpha, &gold, tau, 1e-9);
    let g2 = gmem_core::latent::score_gradient(&alpha_shift, &gold, tau, 1e-9);
    if g1.iter().zip(&g2).any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0)) {
        return Err("score gradient changed under a constant shift".into());
    }
    if (surrogate_loss(&alpha, &gold, 1e-9) - surrogate_loss(&alpha_shift, &gold, 1e-9)).abs() > 1e-9 {
        return Err("loss changed under a constant shift".into());
    }
    // τ → 0 with a unique max separated by ≥ 0.1
    let mut peaked = s.clone();
    let top = rng.random_range(0..n);
    let runner_up = peaked.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    if n > 1 {
        peaked[top] = runner_up.max(peaked[top]) + 0.1 + rng.random_range(0.0..1.0);
    }
    let sharp = relax(&peaked, 1e-3);
    if !(sharp[top] > 1.0 - 1e-6) {
        return Err(format!("α_max = {} at τ = 1e-3", sharp[top]));
    }
    Ok(())
}

// ---------------------------------------------------------------- serializer

pub fn adversarial_field(rng: &mut impl Rng) -> String {
    const ALPHABET: [&str; 16] = ["a", "b", "|", "[", "]", "\\", "\n", " ", "\\n", "\\|", "é", "—", "[none]", "\t", "Relevant Knowledge:", "\r"];
    let len = rng.random_range(0..8);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

pub fn adversarial_triples(rng: &mut impl Rng) -> Vec<Triple> {
    let n = rng.random_range(0..10);
    (0..n)
        .map(|_| Triple::new(adversarial_field(rng), adversarial_field(rng), adversarial_field(rng)))
        .collect()
}

// ---------------------------------------------------------------- DOT

/// Recursive-descent check of the DOT subset: `digraph [id] { stmt* }` with
/// node statements, `a -> b` edge statements and `[k=v, …]` attribute lists.
/// IDs are identifiers, numerals or double-quoted strings. Returns
/// `(nodes, edges)` counts.
pub fn validate_dot(text: &str) -> Result<(usize, usize), String> {
    let mut p = DotParser { s: text.as_bytes(), i: 0 };
    p.ws();
    if !p.keyword("digraph") {
        return Err("expected 'digraph'".into());
    }
    p.ws();
    if p.peek() != Some(b'{') {
        p.id()?;
        p.ws();
    }
    p.expect(b'{')?;
    let (mut nodes, mut edges) = (0, 0);
    loop {
        p.ws();
        match p.peek() {
            Some(b'}') => {
                p.i += 1;
                break;
            }
            None => return Err("unterminated graph body".into()),
            _ => {}
        }
        p.id()?;
        p.ws();
        if p.s[p.i..].starts_with(b"->") {
            p.i += 2;
            p.ws();
            p.id()?;
            p.ws();
            edges += 1;
        } else {
            nodes += 1;
        }
        if p.peek() == Some(b'[') {
            p.attrs()?;
            p.ws();
        }
        if p.peek() == Some(b';') {
            p.i += 1;
        }
    }
    p.ws();
    if p.i != p.s.len() {
        return Err(format!("trailing bytes at {}", p.i));
    }
    Ok((nodes, edges))
}

struct DotParser<'a> {
    s: &'a [u8],
    i: usize,
}

impl DotParser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.i += 1;
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if self.s[self.i..].starts_with(kw.as_bytes()) {
            self.i += kw.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), String> {
        if self.peek() == Some(b) {
            self.i += 1;
            Ok(())
        } else {
            Err(format!("expected '{}' at {}", b as char, self.i))
        }
    }

    fn id(&mut self) -> Result<(), String> {
        match self.peek() {
            Some(b'"') => {
                self.i += 1;
                loop {
                    match self.peek() {
                        None => return Err("unterminated string".into()),
                        Some(b'\\') => {
                            if self.s.get(self.i + 1).is_none() {
                                return Err("dangling backslash".into());
                            }
                            self.i += 2;
                        }
                        Some(b'"') => {
                            self.i += 1;
                            return Ok(());
                        }
                        Some(b'\n') => return Err("raw newline in string".into()),
                        Some(_) => self.i += 1,
                    }
                }
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
                    self.i += 1;
                }
                Ok(())
            }
            Some(c) if c.is_ascii_digit() || c == b'-' || c == b'.' => {
                self.i += 1;
                while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.') {
                    self.i += 1;
                }
                Ok(())
            }
            _ => Err(format!("expected ID at {}", self.i)),
        }
    }

    fn attrs(&mut self) -> Result<(), String> {
        self.expect(b'[')?;
        loop {
            self.ws();
            if self.peek() == Some(b']') {
                self.i += 1;
                return Ok(());
            }
            self.id()?;
            self.ws();
            self.expect(b'=')?;
            self.ws();
            self.id()?;
            self.ws();
            if matches!(self.peek(), Some(b',' | b';')) {
                self.i += 1;
            }
        }
    }
}
