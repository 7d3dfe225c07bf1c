//! Synthetic long documents with planted fact chains.
//!
//! A document is filler prose with template sentences (`<head> <relation
//! phrase> <tail>.`) planted at uniformly random positions. One planted chain
//! `h → m → t` (or a single edge for 1-hop questions) supports the question;
//! the remaining planted facts are distractors that never use the chain's
//! relations, and most of them hang off the chain's entities. Filler words and
//! entity names are drawn from disjoint alphabets, so the rule extractor
//! recovers exactly the planted triples.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::token_count;
use crate::error::{Error, Result};
use crate::extraction::STANDARD_RELATIONS;
use crate::model::{edge_id, QaInstance, Triple};

/// Upper bound on the token length of a planted sentence.
pub const MAX_PLANTED_TOKENS: usize = 8;

const ENTITY_CONSONANTS: &[u8] = b"bdgklmnprstv";
const ENTITY_FINALS: &[u8] = b"nrsl";
const FILLER_CONSONANTS: &[u8] = b"cfhjwyz";
const VOWELS: &[u8] = b"aeiou";

const QUESTION_WORDS: &[&str] = &["the", "entity", "that", "what", "a", "an", "unknown"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Person,
    Org,
    City,
    Country,
}

fn relation_kinds(id: &str) -> (Kind, Kind) {
    use Kind::*;
    match id {
        "works_for" | "studied_at" => (Person, Org),
        "was_born_in" | "lives_in" => (Person, City),
        "is_married_to" | "mentors" => (Person, Person),
        "is_headquartered_in" => (Org, City),
        "was_founded_by" | "sponsors" => (Org, Person),
        "acquired" | "supplies" => (Org, Org),
        "is_located_in" => (City, Country),
        "is_twinned_with" => (City, City),
        "borders" | "exports_to" => (Country, Country),
        "is_governed_by" => (Country, Person),
        other => unreachable!("relation {other} has no entity typing"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    /// Target document length in engine tokens.
    pub target_tokens: usize,
    pub facts: usize,
    /// 1 or 2.
    pub hop_depth: usize,
    pub filler_vocab: usize,
    /// Probability that a distractor attaches to an existing entity.
    pub attach_prob: f64,
}

impl GenConfig {
    /// ~3k-token documents, 12 planted facts, 2-hop questions.
    pub fn standard(seed: u64) -> Self {
        GenConfig {
            seed,
            target_tokens: 3000,
            facts: 12,
            hop_depth: 2,
            filler_vocab: 500,
            attach_prob: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.hop_depth) {
            return Err(Error::Config(format!("hop depth must be 1 or 2, got {}", self.hop_depth)));
        }
        if self.facts < 2 * self.hop_depth {
            return Err(Error::Config(format!(
                "{} facts cannot hold a {}-hop chain plus as many distractors",
                self.facts, self.hop_depth
            )));
        }
        if self.target_tokens < self.facts * MAX_PLANTED_TOKENS {
            return Err(Error::Config(format!(
                "target length {} is too short for {} planted facts",
                self.target_tokens, self.facts
            )));
        }
        if self.filler_vocab < 16 {
            return Err(Error::Config("filler vocabulary needs at least 16 words".into()));
        }
        if !(0.0..=1.0).contains(&self.attach_prob) {
            return Err(Error::Config("attach probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn reserved_words() -> HashSet<String> {
    STANDARD_RELATIONS
        .iter()
        .flat_map(|(_, phrase)| phrase.split_whitespace())
        .chain(QUESTION_WORDS.iter().copied())
        .map(String::from)
        .collect()
}

fn word(rng: &mut ChaCha8Rng, consonants: &[u8], syllables: usize, final_letters: &[u8]) -> String {
    let mut w = String::with_capacity(syllables * 2 + 1);
    for _ in 0..syllables {
        w.push(*consonants.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if !final_letters.is_empty() && rng.random_bool(0.5) {
        w.push(*final_letters.choose(rng).unwrap() as char);
    }
    w
}

/// Shared naming state; keeps entity names unique across a suite.
struct Namer {
    used: HashSet<String>,
    reserved: HashSet<String>,
}

impl Namer {
    fn new() -> Self {
        Namer { used: HashSet::new(), reserved: reserved_words() }
    }

    fn entity(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let n = rng.random_range(2..=3);
            let first = word(rng, ENTITY_CONSONANTS, n, ENTITY_FINALS);
            let n = rng.random_range(2..=3);
            let last = word(rng, ENTITY_CONSONANTS, n, ENTITY_FINALS);
            if self.reserved.contains(&first) || self.reserved.contains(&last) {
                continue;
            }
            let name = format!("{first} {last}");
            if self.used.insert(name.clone()) {
                return name;
            }
        }
    }
}

fn filler_vocabulary(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let reserved = reserved_words();
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let n = rng.random_range(2..=3);
        let w = word(rng, FILLER_CONSONANTS, n, b"");
        if !reserved.contains(&w) && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn phrase(relation: &str) -> &'static str {
    STANDARD_RELATIONS
        .iter()
        .find(|(id, _)| *id == relation)
        .map(|(_, p)| *p)
        .expect("relation is in the standard grammar")
}

fn sentence(t: &Triple) -> String {
    format!("{} {} {}.", t.head, phrase(&t.relation), t.tail)
}

fn generate_with(cfg: &GenConfig, seed: u64, id: String, namer: &mut Namer) -> Result<QaInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relations: Vec<&str> = STANDARD_RELATIONS.iter().map(|(id, _)| *id).collect();

    // supporting chain
    let r1 = *relations.choose(&mut rng).unwrap();
    let (k_head, k_mid) = relation_kinds(r1);
    let head = namer.entity(&mut rng);
    let mid = namer.entity(&mut rng);
    let mut entities: Vec<(String, Kind)> = vec![(head.clone(), k_head), (mid.clone(), k_mid)];
    let mut gold = vec![Triple::new(head.clone(), r1, mid.clone())];
    let (question, answer) = if cfg.hop_depth == 2 {
        let next: Vec<&str> = relations
            .iter()
            .copied()
            .filter(|r| *r != r1 && relation_kinds(r).0 == k_mid)
            .collect();
        let r2 = *next.choose(&mut rng).unwrap();
        let tail = namer.entity(&mut rng);
        entities.push((tail.clone(), relation_kinds(r2).1));
        gold.push(Triple::new(mid.clone(), r2, tail.clone()));
        (
            format!("the entity that {head} {} {} what?", phrase(r1), phrase(r2)),
            tail,
        )
    } else {
        (format!("{head} {} what?", phrase(r1)), mid.clone())
    };

    // distractors
    let gold_relations: HashSet<&str> = gold.iter().map(|t| t.relation.as_str()).collect();
    let free: Vec<&str> = relations.iter().copied().filter(|r| !gold_relations.contains(r)).collect();
    let mut facts = gold.clone();
    while facts.len() < cfg.facts {
        let anchor = if rng.random_bool(cfg.attach_prob) {
            entities.choose(&mut rng).cloned()
        } else {
            None
        };
        let triple = match anchor {
            Some((name, kind)) => {
                let fits: Vec<&str> = free
                    .iter()
                    .copied()
                    .filter(|r| {
                        let (h, t) = relation_kinds(r);
                        h == kind || t == kind
                    })
                    .collect();
                let Some(&r) = fits.choose(&mut rng) else { continue };
                let (h, t) = relation_kinds(r);
                let anchor_is_head = h == kind && (t != kind || rng.random_bool(0.5));
                let other = namer.entity(&mut rng);
                if anchor_is_head {
                    entities.push((other.clone(), t));
                    Triple::new(name, r, other)
                } else {
                    entities.push((other.clone(), h));
                    Triple::new(other, r, name)
                }
            }
            None => {
                let r = *free.choose(&mut rng).unwrap();
                let (h, t) = relation_kinds(r);
                let a = namer.entity(&mut rng);
                let b = namer.entity(&mut rng);
                entities.push((a.clone(), h));
                entities.push((b.clone(), t));
                Triple::new(a, r, b)
            }
        };
        facts.push(triple);
    }
    // planted order is random so the chain is not always first
    for i in (1..facts.len()).rev() {
        let j = rng.random_range(0..=i);
        facts.swap(i, j);
    }

    let planted: Vec<String> = facts.iter().map(sentence).collect();
    let planted_tokens: usize = planted.iter().map(|s| token_count(s)).sum();
    let vocab = filler_vocabulary(&mut rng, cfg.filler_vocab);
    let mut filler = Vec::new();
    let mut total = planted_tokens;
    while total < cfg.target_tokens {
        let n = rng.random_range(6..=14);
        let words: Vec<&str> = (0..n).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect();
        filler.push(format!("{}.", words.join(" ")));
        total += n + 1;
    }
    let mut slots: Vec<usize> = (0..planted.len()).map(|_| rng.random_range(0..=filler.len())).collect();
    slots.sort_unstable();
    let mut sentences = Vec::with_capacity(filler.len() + planted.len());
    let mut next = 0;
    for (i, f) in filler.iter().enumerate() {
        while next < slots.len() && slots[next] == i {
            sentences.push(planted[next].as_str());
            next += 1;
        }
        sentences.push(f.as_str());
    }
    sentences.extend(planted[next..].iter().map(String::as_str));

    Ok(QaInstance {
        id,
        context: sentences.join(" "),
        question,
        answers: vec![answer],
        gold_edge_ids: Some(gold.iter().map(edge_id).collect()),
    })
}

/// One instance, fully determined by `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<QaInstance> {
    generate_with(cfg, cfg.seed, format!("syn-{:016x}", cfg.seed), &mut Namer::new())
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` instances with per-instance derived seeds and suite-wide unique
/// entity names.
pub fn generate_suite(n: usize, cfg: &GenConfig) -> Result<Vec<QaInstance>> {
    if n == 0 {
        return Err(Error::Config("suite size must be at least 1".into()));
    }
    let mut namer = Namer::new();
    (0..n)
        .map(|i| generate_with(cfg, derive_seed(cfg.seed, i as u64), format!("syn-{i:05}"), &mut namer))
        .collect()
}

/// Planted triples of a generated document, recovered from its sentences.
pub fn planted_triples(instance: &QaInstance) -> Vec<Triple> {
    crate::extraction::rule_extract_text(&instance.context, &crate::extraction::RuleGrammar::standard(), true)
}
