//! Retriever training (builder frozen) and alternating joint refinement.
//!
//! The reasoner's answer likelihood is replaced by the soft gold-edge mass
//! `Σ_gold α`, so the loss `−log(Σ_gold α + ε)` keeps the gradient path
//! loss → α → s → (W, Q, A). Hard top-k selection is used only to report
//! recall.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{
    batch_gradients, edge_feature_matrix, query_features, recall_at_k, EmbedderParams, Gradients, InstanceFeatures,
    RetrieverParams, DEFAULT_EPSILON,
};
use crate::model::{fnv1a_seeded, GraphState, QaInstance};

pub use crate::latent::surrogate_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the retriever temperature when set.
    pub temperature: Option<f64>,
    /// Builder-only steps per cycle.
    pub builder_steps: usize,
    /// Joint steps per cycle.
    pub joint_steps: usize,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            temperature: None,
            builder_steps: 1,
            joint_steps: 4,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if self.builder_steps == 0 && self.joint_steps == 0 {
            return Err(Error::Config("alternation ratio cannot be 0:0".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Recall@k of the starting parameters.
    pub initial_recall: f64,
    pub losses: Vec<f64>,
    pub recalls: Vec<f64>,
    /// Fraction of instances with every gold edge selected, per epoch.
    pub full_recalls: Vec<f64>,
    pub checksum: String,
}

impl TrainReport {
    pub fn final_recall(&self) -> f64 {
        self.recalls.last().copied().unwrap_or(self.initial_recall)
    }
}

/// Hashed inputs for one instance against its built graph.
pub fn instance_features(instance: &QaInstance, graph: &GraphState, ep: &EmbedderParams) -> Result<InstanceFeatures> {
    let gold_ids = instance.gold_edge_ids.as_deref().unwrap_or_default();
    Ok(InstanceFeatures {
        query: query_features(&instance.question, ep.dim(), ep.hash_seed)?,
        edges: edge_feature_matrix(graph.edges(), ep.dim(), ep.hash_seed),
        gold: gold_ids.iter().filter_map(|id| graph.position(*id)).collect(),
        gold_total: gold_ids.len(),
    })
}

/// `p ← p − lr·g`.
pub fn sgd_step(param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) -> Result<()> {
    if param.dim() != grad.dim() {
        return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", param.dim(), grad.dim())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    param.scaled_add(-lr, grad);
    Ok(())
}

/// FNV-1a over the little-endian bytes of every parameter.
pub fn params_checksum(ep: &EmbedderParams, rp: &RetrieverParams) -> String {
    let mut h = ep.hash_seed;
    for m in [&ep.edge_map, &rp.bilinear, &rp.query_map] {
        for x in m.iter() {
            h = fnv1a_seeded(h, &x.to_le_bytes());
        }
    }
    h = fnv1a_seeded(h, &rp.temperature.to_le_bytes());
    h = fnv1a_seeded(h, &(rp.budget as u64).to_le_bytes());
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepKind {
    BuilderOnly,
    RetrieverOnly,
    Joint,
}

fn apply(step: StepKind, g: &Gradients, ep: &mut EmbedderParams, rp: &mut RetrieverParams, lr: f64) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if matches!(step, StepKind::BuilderOnly | StepKind::Joint) {
        sgd_step(&mut ep.edge_map, &g.edge_map, lr)?;
    }
    if matches!(step, StepKind::RetrieverOnly | StepKind::Joint) {
        sgd_step(&mut rp.bilinear, &g.bilinear, lr)?;
        sgd_step(&mut rp.query_map, &g.query_map, lr)?;
    }
    Ok(())
}

fn run(
    data: &[InstanceFeatures],
    ep: &mut EmbedderParams,
    rp: &mut RetrieverParams,
    cfg: &TrainConfig,
    schedule: impl Fn(usize) -> StepKind,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(t) = cfg.temperature {
        rp.temperature = t;
    }
    rp.validate()?;
    ep.validate()?;
    let trainable: Vec<&InstanceFeatures> = data.iter().filter(|x| !x.gold.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..trainable.len()).collect();
    let mut report = TrainReport {
        initial_recall: recall_at_k(data, ep, rp).recall,
        losses: Vec::with_capacity(cfg.epochs),
        recalls: Vec::with_capacity(cfg.epochs),
        full_recalls: Vec::with_capacity(cfg.epochs),
        checksum: String::new(),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&InstanceFeatures> = idx.iter().map(|&i| trainable[i]).collect();
            let g = batch_gradients(&batch, ep, rp, cfg.epsilon);
            if !g.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: g.loss });
            }
            loss_sum += g.loss;
            batches += 1;
            apply(schedule(step), &g, ep, rp, cfg.learning_rate)?;
            step += 1;
        }
        let loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        let stats = recall_at_k(data, ep, rp);
        log::debug!("epoch {epoch}: loss {loss:.5} recall@{} {:.4}", rp.budget, stats.recall);
        report.losses.push(loss);
        report.recalls.push(stats.recall);
        report.full_recalls.push(stats.full_recall);
    }
    report.checksum = params_checksum(ep, rp);
    Ok(report)
}

/// Trains `W` and `Q` with the builder-side map `A` frozen.
pub fn stage2_train(
    data: &[InstanceFeatures],
    ep: &EmbedderParams,
    rp: RetrieverParams,
    cfg: &TrainConfig,
) -> Result<(RetrieverParams, TrainReport)> {
    let mut ep = ep.clone();
    let mut rp = rp;
    let report = run(data, &mut ep, &mut rp, cfg, |_| StepKind::RetrieverOnly)?;
    Ok((rp, report))
}

/// Alternates `builder_steps` updates of `A` alone with `joint_steps`
/// updates of `(A, W, Q)`.
pub fn stage3_train(
    data: &[InstanceFeatures],
    ep: EmbedderParams,
    rp: RetrieverParams,
    cfg: &TrainConfig,
) -> Result<(EmbedderParams, RetrieverParams, TrainReport)> {
    let mut ep = ep;
    let mut rp = rp;
    let cycle = cfg.builder_steps + cfg.joint_steps;
    let builder_steps = cfg.builder_steps;
    let report = run(data, &mut ep, &mut rp, cfg, move |step| {
        if step % cycle.max(1) < builder_steps {
            StepKind::BuilderOnly
        } else {
            StepKind::Joint
        }
    })?;
    Ok((ep, rp, report))
}
