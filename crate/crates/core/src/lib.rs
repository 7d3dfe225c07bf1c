//! Capacity-bounded streaming triple memory with budgeted latent subgraph
//! retrieval.
//!
//! A long context is chunked, facts are extracted per chunk and merged into a
//! graph that never holds more than `capacity` edges. Each edge is embedded;
//! at question time a bilinear scorer picks the `budget` most relevant edges
//! and only those are serialized into the reasoner's prompt. The scorer and
//! embedding maps are trained with a straight-through softmax relaxation.
//!
//! ```
//! use gmem_core::{Pipeline, RuleExtractor, MockReasoner, synth};
//!
//! let inst = synth::generate(&synth::GenConfig::standard(3)).unwrap();
//! let pipeline = Pipeline::default();
//! let memory = pipeline.memorize(&inst.context, &RuleExtractor::standard()).unwrap();
//! let reasoner = MockReasoner::for_instance(&inst).unwrap();
//! let answer = pipeline.answer_from_memory(&memory, &inst.question, &reasoner).unwrap();
//! assert!(answer.subgraph.len() <= pipeline.retriever.budget);
//! ```

pub mod builder;
pub mod chunker;
pub mod client;
pub mod config;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod latent;
pub mod model;
pub mod persistence;
pub mod reasoner;
pub mod serializer;
pub mod synth;
pub mod trainer;

pub use builder::{build, BuildReport, FilterCounts};
pub use chunker::{chunk, Chunk};
pub use client::{ServiceClient, ServiceConfig};
pub use config::Settings;
pub use error::{Error, Result};
pub use extraction::{Extractor, RemoteExtractor, RuleExtractor, RuleGrammar};
pub use latent::{retrieve, EmbedderParams, EmbeddingMatrix, RetrieverParams, Subgraph};
pub use model::{edge_id, BuildConfig, Edge, EdgeId, FrozenGraph, GraphState, QaInstance, Triple};
pub use reasoner::{answer, Answer, Memory, MockReasoner, Pipeline, Reasoner, RemoteReasoner, SurrogateReasoner};
pub use serializer::{compose_prompt, serialize, EvidenceText};
pub use trainer::{stage2_train, stage3_train, TrainConfig, TrainReport};
