//! Answer metrics, retrieval baselines, ablations, the capacity sweep and
//! the latency harness.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::builder::build;
use crate::chunker::{chunk, tokenize};
use crate::error::{Error, Result};
use crate::extraction::Extractor;
use crate::latent::{bag_features, embed_edges, recall_at_k, topk, Subgraph};
use crate::model::{canonicalize_entity, BuildConfig, GraphState, QaInstance};
use crate::reasoner::{Memory, MockReasoner, Pipeline, Reasoner};
use crate::serializer::{compose_prompt, serialize, EvidenceText};
use crate::synth::{generate_suite, GenConfig};
use crate::trainer::instance_features;

/// Lowercase, punctuation to spaces, articles dropped, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Correct iff a normalized gold equals the normalized prediction or occurs in
/// it as a contiguous token run.
pub fn accuracy_match(prediction: &str, golds: &[String]) -> bool {
    let pred = normalize_answer(prediction);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    golds.iter().any(|g| {
        let gold = normalize_answer(g);
        if gold == pred {
            return true;
        }
        let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
        !gold_tokens.is_empty() && pred_tokens.windows(gold_tokens.len()).any(|w| w == gold_tokens.as_slice())
    })
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let p = rouge_tokens(prediction);
    let g = rouge_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetric {
    pub id: String,
    pub prediction: String,
    pub correct: bool,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: Vec<InstanceMetric>,
    /// Percent.
    pub accuracy: f64,
    /// Mean ROUGE-L, percent.
    pub rouge_l: f64,
    /// Gold-edge recall@k when the run used learned retrieval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

impl MetricReport {
    pub fn from_predictions(rows: Vec<(String, String, Vec<String>)>) -> Self {
        let instances: Vec<InstanceMetric> = rows
            .into_iter()
            .map(|(id, prediction, golds)| {
                let correct = accuracy_match(&prediction, &golds);
                let rouge = golds.iter().map(|g| rouge_l(&prediction, g)).fold(0.0, f64::max);
                InstanceMetric { id, prediction, correct, rouge_l: rouge }
            })
            .collect();
        let n = instances.len().max(1) as f64;
        let accuracy = 100.0 * instances.iter().filter(|m| m.correct).count() as f64 / n;
        let rouge_l = 100.0 * instances.iter().map(|m| m.rouge_l).sum::<f64>() / n;
        MetricReport { instances, accuracy, rouge_l, recall: None }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,prediction,correct,rouge_l\n");
        for m in &self.instances {
            let _ = writeln!(out, "{},{},{},{:.6}", csv_field(&m.id), csv_field(&m.prediction), m.correct, m.rouge_l);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn contains_span(haystack: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Breadth-first expansion from edges whose head or tail is mentioned in the
/// question. Rounds are ordered by insertion order; stops at `k` edges. Falls
/// back to the first `k` edges when nothing is mentioned.
pub fn bfs_retrieve(graph: &GraphState, question: &str, k: usize) -> Subgraph {
    let q_lower = canonicalize_entity(question).unwrap_or_default();
    let q_tokens: Vec<&str> = tokenize(&q_lower);
    let mentioned = |entity: &str| contains_span(&q_tokens, &tokenize(entity));
    let edges = graph.edges();
    let mut round: Vec<usize> = (0..edges.len())
        .filter(|&i| mentioned(&edges[i].triple.head) || mentioned(&edges[i].triple.tail))
        .collect();
    if round.is_empty() {
        let n = k.min(edges.len());
        return Subgraph::from_indices(graph, (0..n).collect(), vec![0.0; n]);
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut scores = Vec::new();
    let mut taken = vec![false; edges.len()];
    let mut seen_entities: HashSet<&str> = HashSet::new();
    let mut depth = 0.0;
    while !round.is_empty() && chosen.len() < k {
        let mut frontier = Vec::new();
        for &i in &round {
            if chosen.len() == k {
                break;
            }
            taken[i] = true;
            chosen.push(i);
            scores.push(-depth);
            for e in [edges[i].triple.head.as_str(), edges[i].triple.tail.as_str()] {
                if seen_entities.insert(e) {
                    frontier.push(e);
                }
            }
        }
        let frontier: HashSet<&str> = frontier.into_iter().collect();
        round = (0..edges.len())
            .filter(|&i| {
                !taken[i]
                    && (frontier.contains(edges[i].triple.head.as_str())
                        || frontier.contains(edges[i].triple.tail.as_str()))
            })
            .collect();
        depth += 1.0;
    }
    Subgraph::from_indices(graph, chosen, scores)
}

/// Chunk-level retrieval baseline: hashed bag-of-words cosine between the
/// question and each chunk, top `k_chunks` raw chunk texts as evidence.
pub fn rag_retrieve(context: &str, question: &str, k_chunks: usize, cfg: &BuildConfig, dim: usize, seed: u64) -> EvidenceText {
    let chunks = chunk(context, cfg);
    let q = bag_features(question, "w:", dim, seed);
    let sims: Vec<f64> = chunks
        .iter()
        .map(|c| bag_features(&c.text, "w:", dim, seed).dot(&q))
        .collect();
    let picked = topk(&sims, k_chunks);
    EvidenceText::raw(picked.iter().map(|&i| chunks[i].text.as_str()).collect::<Vec<_>>().join("\n\n"))
}

/// Evidence strategies compared by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Paradigm {
    ReasonerOnly,
    FullGraph,
    Bfs,
    Rag { k_chunks: usize },
    Learned,
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::ReasonerOnly => "reasoner-only",
            Paradigm::FullGraph => "full-graph",
            Paradigm::Bfs => "bfs",
            Paradigm::Rag { .. } => "chunk-rag",
            Paradigm::Learned => "learned",
        }
    }
}

/// Prompt for one instance under a paradigm; memory is built once per
/// instance and shared.
pub fn paradigm_prompt(paradigm: Paradigm, instance: &QaInstance, memory: &Memory, pipeline: &Pipeline) -> Result<String> {
    let q = &instance.question;
    let evidence = match paradigm {
        Paradigm::ReasonerOnly => return Ok(format!("Question: {q}\nAnswer:")),
        Paradigm::FullGraph => serialize(memory.graph.edges().iter().map(|e| &e.triple)),
        Paradigm::Bfs => serialize(bfs_retrieve(&memory.graph, q, pipeline.retriever.budget).triples()),
        Paradigm::Rag { k_chunks } => rag_retrieve(
            &instance.context,
            q,
            k_chunks,
            &pipeline.build,
            pipeline.embedder.dim(),
            pipeline.embedder.hash_seed,
        ),
        Paradigm::Learned => serialize(memory.retrieve(q, &pipeline.retriever, &pipeline.embedder)?.triples()),
    };
    Ok(compose_prompt(&evidence, q))
}

pub fn build_memories(instances: &[QaInstance], pipeline: &Pipeline, extractor: &dyn Extractor) -> Result<Vec<Memory>> {
    instances.iter().map(|i| pipeline.memorize(&i.context, extractor)).collect()
}

/// Mock-reasoner metrics for `paradigm` over prebuilt memories.
pub fn evaluate_paradigm(
    paradigm: Paradigm,
    instances: &[QaInstance],
    memories: &[Memory],
    pipeline: &Pipeline,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(instances.len());
    for (inst, mem) in instances.iter().zip(memories) {
        let prompt = paradigm_prompt(paradigm, inst, mem, pipeline)?;
        let prediction = MockReasoner::for_instance(inst)?.generate(&prompt)?;
        rows.push((inst.id.clone(), prediction, inst.answers.clone()));
    }
    let mut report = MetricReport::from_predictions(rows);
    if paradigm == Paradigm::Learned {
        report.recall = Some(learned_recall(instances, memories, pipeline)?);
    }
    Ok(report)
}

/// Gold-edge recall@k of learned retrieval, through the trainer's code path.
pub fn learned_recall(instances: &[QaInstance], memories: &[Memory], pipeline: &Pipeline) -> Result<f64> {
    let features = instances
        .iter()
        .zip(memories)
        .map(|(i, m)| instance_features(i, &m.graph, &pipeline.embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok(recall_at_k(&features, &pipeline.embedder, &pipeline.retriever).recall)
}

/// Answers every instance with an arbitrary reasoner.
pub fn evaluate_with(
    instances: &[QaInstance],
    pipeline: &Pipeline,
    extractor: &dyn Extractor,
    reasoner_for: &dyn Fn(&QaInstance) -> Result<Box<dyn Reasoner>>,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(instances.len());
    for inst in instances {
        let reasoner = reasoner_for(inst)?;
        let answer = pipeline.answer(&inst.context, &inst.question, extractor, reasoner.as_ref())?;
        rows.push((inst.id.clone(), answer.text, inst.answers.clone()));
    }
    Ok(MetricReport::from_predictions(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub paradigm: Paradigm,
    pub report: MetricReport,
}

pub fn ablation_suite(
    instances: &[QaInstance],
    pipeline: &Pipeline,
    extractor: &dyn Extractor,
    k_chunks: usize,
) -> Result<Vec<AblationRow>> {
    let memories = build_memories(instances, pipeline, extractor)?;
    [
        Paradigm::ReasonerOnly,
        Paradigm::FullGraph,
        Paradigm::Bfs,
        Paradigm::Rag { k_chunks },
        Paradigm::Learned,
    ]
    .into_iter()
    .map(|p| {
        Ok(AblationRow {
            paradigm: p,
            report: evaluate_paradigm(p, instances, &memories, pipeline)?,
        })
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub capacity: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub mean_edges: f64,
}

/// Learned-retrieval accuracy for each global capacity on a fixed suite.
pub fn capacity_sweep(
    instances: &[QaInstance],
    capacities: &[usize],
    pipeline: &Pipeline,
    extractor: &dyn Extractor,
) -> Result<Vec<SweepRow>> {
    capacities
        .iter()
        .map(|&capacity| {
            let mut p = pipeline.clone();
            p.build.capacity = capacity;
            let memories = build_memories(instances, &p, extractor)?;
            let report = evaluate_paradigm(Paradigm::Learned, instances, &memories, &p)?;
            let mean_edges = memories.iter().map(|m| m.graph.len() as f64).sum::<f64>() / memories.len().max(1) as f64;
            Ok(SweepRow {
                capacity,
                accuracy: report.accuracy,
                recall: report.recall.unwrap_or(0.0),
                mean_edges,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub context_tokens: usize,
    pub mean_chunks: f64,
    pub mean_edges: f64,
    /// Chunk, extract, merge/filter/cap and embed.
    pub build_seconds: f64,
    /// Retrieve, serialize, compose and mock-answer.
    pub answer_seconds: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub samples: usize,
    /// Timed repetitions of the answer phase per sample (averaged).
    pub answer_repeats: usize,
    pub facts: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { samples: 100, answer_repeats: 1, facts: 200, seed: 11 }
    }
}

pub const TIMING_LENGTHS: [usize; 5] = [6000, 7000, 8000, 9000, 10000];

fn timing_suite(li: usize, length: usize, cfg: &TimingConfig) -> Result<Vec<QaInstance>> {
    if length == 0 {
        return Ok((0..cfg.samples)
            .map(|i| QaInstance {
                id: format!("empty-{i}"),
                context: String::new(),
                question: "what is known?".into(),
                answers: vec!["nothing".into()],
                gold_edge_ids: Some(Vec::new()),
            })
            .collect());
    }
    let facts = cfg.facts.min(length / crate::synth::MAX_PLANTED_TOKENS).max(2);
    let gen = GenConfig { seed: cfg.seed.wrapping_add(li as u64), target_tokens: length, facts, ..GenConfig::standard(0) };
    generate_suite(cfg.samples, &gen)
}

/// Wall-clock build and answer phases per context length, single-threaded.
pub fn timing_harness(
    lengths: &[usize],
    cfg: &TimingConfig,
    pipeline: &Pipeline,
    extractor: &dyn Extractor,
) -> Result<Vec<TimingRow>> {
    if cfg.samples == 0 || cfg.answer_repeats == 0 {
        return Err(Error::Config("timing needs at least one sample and one repeat".into()));
    }
    let suites = lengths
        .iter()
        .enumerate()
        .map(|(li, &length)| timing_suite(li, length, cfg))
        .collect::<Result<Vec<_>>>()?;
    for inst in suites.iter().filter_map(|s| s.first()) {
        // Untimed warm-up so allocator and cache state do not bias the first samples.
        let memory = pipeline.memorize(&inst.context, extractor)?;
        pipeline.answer_from_memory(&memory, &inst.question, &MockReasoner::for_instance(inst)?)?;
    }
    // Lengths are interleaved per sample so drift in machine load spreads
    // evenly over all rows instead of biasing whichever length runs first.
    let mut totals = vec![[0.0f64; 4]; lengths.len()];
    for i in 0..cfg.samples {
        for (suite, total) in suites.iter().zip(totals.iter_mut()) {
            let inst = &suite[i];
            let reasoner = MockReasoner::for_instance(inst)?;
            let t0 = Instant::now();
            let (graph, report) = build(&inst.context, extractor, &pipeline.build)?;
            let embeddings = embed_edges(&graph, &pipeline.embedder);
            total[0] += t0.elapsed().as_secs_f64();
            total[2] += report.chunks_processed as f64;
            total[3] += graph.len() as f64;
            let memory = Memory { graph, embeddings, report };
            let t1 = Instant::now();
            for _ in 0..cfg.answer_repeats {
                std::hint::black_box(pipeline.answer_from_memory(&memory, &inst.question, &reasoner)?);
            }
            total[1] += t1.elapsed().as_secs_f64() / cfg.answer_repeats as f64;
        }
    }
    let n = cfg.samples as f64;
    let rows = lengths
        .iter()
        .zip(totals)
        .map(|(&length, [build_s, answer_s, chunks, edges])| TimingRow {
            context_tokens: length,
            mean_chunks: chunks / n,
            mean_edges: edges / n,
            build_seconds: build_s / n,
            answer_seconds: answer_s / n,
            samples: cfg.samples,
        })
        .collect();
    Ok(rows)
}

/// Relative spread `(max − min) / min` of the answer phase across rows.
pub fn answer_time_spread(rows: &[TimingRow]) -> f64 {
    let times: Vec<f64> = rows.iter().map(|r| r.answer_seconds).collect();
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - min) / min
}

/// Largest ratio of measured build time to a least-squares line through the
/// origin in chunk count. Values near 1 mean linear growth; super-linear
/// growth pushes the longest contexts above the line.
pub fn build_growth_ratio(rows: &[TimingRow]) -> f64 {
    let sxy: f64 = rows.iter().map(|r| r.mean_chunks * r.build_seconds).sum();
    let sxx: f64 = rows.iter().map(|r| r.mean_chunks * r.mean_chunks).sum();
    if sxx == 0.0 || sxy == 0.0 {
        return 0.0;
    }
    let slope = sxy / sxx;
    rows.iter()
        .filter(|r| r.mean_chunks > 0.0)
        .map(|r| r.build_seconds / (slope * r.mean_chunks))
        .fold(0.0, f64::max)
}

pub fn timing_table(rows: &[TimingRow]) -> String {
    let mut out = format!(
        "{:>8} {:>7} {:>7} {:>12} {:>12} {:>7}\n",
        "tokens", "chunks", "edges", "build_s", "answer_s", "samples"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8} {:>7.2} {:>7.1} {:>12.6} {:>12.6} {:>7}",
            r.context_tokens, r.mean_chunks, r.mean_edges, r.build_seconds, r.answer_seconds, r.samples
        );
    }
    out
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("context_tokens,mean_chunks,mean_edges,build_seconds,answer_seconds,samples\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.9},{:.9},{}",
            r.context_tokens, r.mean_chunks, r.mean_edges, r.build_seconds, r.answer_seconds, r.samples
        );
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<14} {:>8} {:>9} {:>8}\n", "paradigm", "acc%", "rougeL%", "recall");
    for r in rows {
        let recall = r.report.recall.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{:<14} {:>8.2} {:>9.2} {:>8}", r.paradigm.name(), r.report.accuracy, r.report.rouge_l, recall);
    }
    out
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6} {:>8} {:>8} {:>8}\n", "M", "acc%", "recall", "edges");
    for r in rows {
        let _ = writeln!(out, "{:>6} {:>8.2} {:>8.4} {:>8.2}", r.capacity, r.accuracy, r.recall, r.mean_edges);
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("capacity,accuracy,recall,mean_edges\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.4}", r.capacity, r.accuracy, r.recall, r.mean_edges);
    }
    out
}
