//! The frozen reasoner boundary and the end-to-end inference pipeline.
//!
//! A reasoner only ever sees a composed prompt: serialized evidence plus the
//! question. The raw context never crosses this boundary.

use std::collections::HashSet;

use crate::builder::{build, BuildReport};
use crate::chunker::{token_count, tokenize};
use crate::client::{Message, ServiceClient};
use crate::error::{Error, Result};
use crate::extraction::{rule_extract_text, Extractor, RuleGrammar};
use crate::latent::{embed_edges, retrieve, surrogate_loss, EmbedderParams, EmbeddingMatrix, RetrieverParams, Subgraph};
use crate::model::{edge_id, BuildConfig, EdgeId, FrozenGraph, QaInstance, Triple};
use crate::serializer::{compose_prompt, parse, serialize, split_prompt, HEADER};

pub const UNKNOWN_ANSWER: &str = "unknown";

pub trait Reasoner: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String>;

    /// Teacher-forced log-probability of each answer token.
    fn logprobs(&self, _prompt: &str, _answer_tokens: &[String]) -> Result<Vec<f64>> {
        Err(Error::Capability("per-token log-probabilities"))
    }
}

/// Triples carried by the evidence block of a prompt: parsed when the block
/// is serialized evidence, rule-extracted when it is raw text.
pub fn evidence_triples(prompt: &str, grammar: &RuleGrammar) -> Vec<Triple> {
    let evidence = split_prompt(prompt).map_or(prompt, |(e, _)| e);
    if evidence.starts_with(HEADER) {
        if let Ok(parsed) = parse(evidence) {
            return parsed.triples;
        }
    }
    rule_extract_text(evidence, grammar, true)
}

fn covers(gold: &[EdgeId], present: &HashSet<EdgeId>) -> bool {
    gold.iter().all(|g| present.contains(g))
}

/// Answers with the gold answer iff every gold edge is in the subgraph.
pub fn mock_answer(subgraph: &Subgraph, instance: &QaInstance) -> Result<String> {
    let gold = instance
        .gold_edge_ids
        .as_deref()
        .ok_or(Error::Capability("mock answering without gold edge ids"))?;
    let present: HashSet<EdgeId> = subgraph.edges.iter().map(|e| e.id).collect();
    Ok(if covers(gold, &present) {
        instance.answers[0].clone()
    } else {
        UNKNOWN_ANSWER.to_string()
    })
}

/// Deterministic reasoner bound to one synthetic instance. It reads the
/// evidence out of the prompt and applies the [`mock_answer`] rule.
#[derive(Debug, Clone)]
pub struct MockReasoner {
    answer: String,
    gold: Vec<EdgeId>,
    grammar: RuleGrammar,
}

impl MockReasoner {
    pub fn for_instance(instance: &QaInstance) -> Result<Self> {
        let gold = instance
            .gold_edge_ids
            .clone()
            .ok_or(Error::Capability("mock answering without gold edge ids"))?;
        Ok(MockReasoner {
            answer: instance.answers[0].clone(),
            gold,
            grammar: RuleGrammar::standard(),
        })
    }
}

impl Reasoner for MockReasoner {
    fn generate(&self, prompt: &str) -> Result<String> {
        let present: HashSet<EdgeId> = evidence_triples(prompt, &self.grammar).iter().map(edge_id).collect();
        Ok(if !self.gold.is_empty() && covers(&self.gold, &present) {
            self.answer.clone()
        } else {
            UNKNOWN_ANSWER.to_string()
        })
    }

    fn logprobs(&self, prompt: &str, answer_tokens: &[String]) -> Result<Vec<f64>> {
        let produced = self.generate(prompt)?;
        let expected: Vec<&str> = tokenize(&produced);
        Ok(answer_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if expected.get(i) == Some(&t.as_str()) { 0.0 } else { f64::NEG_INFINITY })
            .collect())
    }
}

/// Differentiable stand-in for a frozen language model.
///
/// Each answer token gets probability `λ·[token ∈ evidence]/|evidence| +
/// (1−λ)/V`, where `evidence` is the set of distinct tokens in the evidence
/// triples. Its trainable-path counterpart is [`SurrogateReasoner::soft_nll`].
#[derive(Debug, Clone)]
pub struct SurrogateReasoner {
    pub vocab_size: usize,
    pub evidence_weight: f64,
    grammar: RuleGrammar,
}

impl SurrogateReasoner {
    pub fn new(vocab_size: usize, evidence_weight: f64) -> Result<Self> {
        if vocab_size == 0 || !(0.0..=1.0).contains(&evidence_weight) || (evidence_weight == 1.0) {
            return Err(Error::Config(
                "surrogate needs vocab_size >= 1 and evidence weight in [0, 1)".into(),
            ));
        }
        Ok(SurrogateReasoner { vocab_size, evidence_weight, grammar: RuleGrammar::standard() })
    }

    fn evidence_tokens(&self, prompt: &str) -> HashSet<String> {
        evidence_triples(prompt, &self.grammar)
            .iter()
            .flat_map(|t| t.fields().into_iter().flat_map(tokenize).map(str::to_lowercase).collect::<Vec<_>>())
            .collect()
    }

    /// Answer NLL when evidence is selected softly with weights `alpha`.
    pub fn soft_nll(&self, alpha: &[f64], gold: &[usize], epsilon: f64) -> f64 {
        surrogate_loss(alpha, gold, epsilon)
    }
}

impl Reasoner for SurrogateReasoner {
    fn generate(&self, prompt: &str) -> Result<String> {
        Ok(evidence_triples(prompt, &self.grammar)
            .first()
            .map(|t| t.tail.clone())
            .unwrap_or_else(|| UNKNOWN_ANSWER.to_string()))
    }

    fn logprobs(&self, prompt: &str, answer_tokens: &[String]) -> Result<Vec<f64>> {
        let evidence = self.evidence_tokens(prompt);
        let background = (1.0 - self.evidence_weight) / self.vocab_size as f64;
        Ok(answer_tokens
            .iter()
            .map(|t| {
                let hit = if evidence.contains(&t.to_lowercase()) {
                    self.evidence_weight / evidence.len() as f64
                } else {
                    0.0
                };
                (hit + background).ln()
            })
            .collect())
    }
}

/// Reasoner served over a chat-completion endpoint, decoded greedily.
#[derive(Debug)]
pub struct RemoteReasoner {
    client: ServiceClient,
    pub system_prompt: Option<String>,
}

impl RemoteReasoner {
    pub fn new(client: ServiceClient) -> Self {
        RemoteReasoner { client, system_prompt: None }
    }

    pub fn client(&self) -> &ServiceClient {
        &self.client
    }

    fn messages(&self, prompt: &str) -> Result<Vec<Message>> {
        if let Some(limit) = self.client.config().max_prompt_tokens {
            let tokens = token_count(prompt);
            if tokens > limit {
                return Err(Error::PromptTooLong { tokens, limit });
            }
        }
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &self.system_prompt {
            messages.push(Message::system(system.clone()));
        }
        messages.push(Message::user(prompt));
        Ok(messages)
    }
}

impl Reasoner for RemoteReasoner {
    fn generate(&self, prompt: &str) -> Result<String> {
        let messages = self.messages(prompt)?;
        let text = self.client.chat(&messages)?.trim().to_string();
        if text.is_empty() {
            log::warn!("reasoner returned an empty completion");
        }
        Ok(text)
    }

    fn logprobs(&self, prompt: &str, answer_tokens: &[String]) -> Result<Vec<f64>> {
        let messages = self.messages(prompt)?;
        self.client
            .answer_logprobs(&messages, &answer_tokens.join(" "), answer_tokens.len())
    }
}

/// A built document: the frozen graph and its embedding matrix.
#[derive(Debug, Clone)]
pub struct Memory {
    pub graph: FrozenGraph,
    pub embeddings: EmbeddingMatrix,
    pub report: BuildReport,
}

impl Memory {
    pub fn retrieve(&self, question: &str, rp: &RetrieverParams, ep: &EmbedderParams) -> Result<Subgraph> {
        retrieve(&self.graph, &self.embeddings, question, rp, ep)
    }
}

/// Build, retrieval and answering settings for end-to-end inference.
#[derive(Debug, Clone, Default)]
pub struct Pipeline {
    pub build: BuildConfig,
    pub embedder: EmbedderParams,
    pub retriever: RetrieverParams,
}

#[derive(Debug, Clone)]
pub struct Answer {
    pub text: String,
    pub subgraph: Subgraph,
    pub prompt: String,
}

impl Pipeline {
    pub fn memorize(&self, context: &str, extractor: &dyn Extractor) -> Result<Memory> {
        let (graph, report) = build(context, extractor, &self.build)?;
        let embeddings = embed_edges(&graph, &self.embedder);
        Ok(Memory { graph, embeddings, report })
    }

    /// Retrieval, serialization of the subgraph only, and generation.
    pub fn answer_from_memory(&self, memory: &Memory, question: &str, reasoner: &dyn Reasoner) -> Result<Answer> {
        let subgraph = memory.retrieve(question, &self.retriever, &self.embedder)?;
        let prompt = compose_prompt(&serialize(subgraph.triples()), question);
        let text = reasoner.generate(&prompt)?;
        Ok(Answer { text, subgraph, prompt })
    }

    pub fn answer(
        &self,
        context: &str,
        question: &str,
        extractor: &dyn Extractor,
        reasoner: &dyn Reasoner,
    ) -> Result<Answer> {
        let memory = self.memorize(context, extractor)?;
        self.answer_from_memory(&memory, question, reasoner)
    }
}

/// `x → (E, U) → S_q → evidence → F → a`.
pub fn answer(
    context: &str,
    question: &str,
    extractor: &dyn Extractor,
    pipeline: &Pipeline,
    reasoner: &dyn Reasoner,
) -> Result<(String, Subgraph)> {
    pipeline
        .answer(context, question, extractor, reasoner)
        .map(|a| (a.text, a.subgraph))
}
