//! Python bindings: synthetic data, memory building, retrieval, answering,
//! training and evaluation.
//!
//! Instances cross the boundary as plain dicts (`id`, `context`, `question`,
//! `answers`, optional `gold_edge_ids`); a reasoner is any callable taking a
//! prompt string and returning an answer string.

use std::path::PathBuf;

use gmem_core::eval::{self, Paradigm};
use gmem_core::persistence;
use gmem_core::synth::{self, GenConfig};
use gmem_core::trainer::instance_features;
use gmem_core::{
    BuildReport, Error, MockReasoner, Pipeline, QaInstance, Reasoner, RuleExtractor, Settings, Subgraph, TrainConfig,
    Triple,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyList;

create_exception!(gmem, GmemError, PyException, "Raised for any failure inside the memory library.");

fn py_err(e: Error) -> PyErr {
    GmemError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| py_err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = value.py().import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| py_err(e.into()))
}

fn instances(value: &Bound<'_, PyAny>) -> PyResult<Vec<QaInstance>> {
    let data: Vec<QaInstance> = from_py(value)?;
    for inst in &data {
        inst.validate().map_err(py_err)?;
    }
    Ok(data)
}

/// Adapts a Python callable to the reasoner interface.
struct CallableReasoner(Py<PyAny>);

impl Reasoner for CallableReasoner {
    fn generate(&self, prompt: &str) -> gmem_core::Result<String> {
        Python::attach(|py| {
            self.0
                .call1(py, (prompt,))
                .and_then(|r| r.extract::<String>(py))
                .map_err(|e| Error::Transport { attempts: 1, message: e.to_string() })
        })
    }
}

/// A built document memory.
#[pyclass(name = "Memory", module = "gmem", frozen)]
struct PyMemory {
    inner: gmem_core::Memory,
    build: gmem_core::BuildConfig,
}

#[pymethods]
impl PyMemory {
    fn __len__(&self) -> usize {
        self.inner.graph.len()
    }

    /// `(head, relation, tail, occurrence_count)` in insertion order.
    fn edges(&self) -> Vec<(String, String, String, u64)> {
        self.inner
            .graph
            .edges()
            .iter()
            .map(|e| (e.triple.head.clone(), e.triple.relation.clone(), e.triple.tail.clone(), e.occurrence_count))
            .collect()
    }

    /// Build counters as a dict.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.report)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        persistence::save_memory(&path, &self.inner.graph, &self.inner.embeddings, &self.build).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (graph, embeddings, build) = persistence::load_memory(&path).map_err(py_err)?;
        let inner = gmem_core::Memory { graph: graph.freeze(), embeddings, report: BuildReport::default() };
        Ok(PyMemory { inner, build })
    }

    fn __repr__(&self) -> String {
        format!("Memory(edges={}, capacity={})", self.inner.graph.len(), self.build.capacity)
    }
}

/// The subgraph selected for one question.
#[pyclass(name = "Subgraph", module = "gmem", frozen)]
struct PySubgraph {
    inner: Subgraph,
}

#[pymethods]
impl PySubgraph {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(head, relation, tail)` in selection order.
    fn triples(&self) -> Vec<(String, String, String)> {
        self.inner.triples().map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone())).collect()
    }

    /// Selection weights aligned with `triples()`.
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.clone()
    }

    /// The evidence block handed to a reasoner.
    fn text(&self) -> String {
        gmem_core::serialize(self.inner.triples()).to_string()
    }

    fn dot(&self) -> String {
        persistence::to_dot(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Subgraph(edges={})", self.inner.len())
    }
}

/// Build, retrieval and training settings plus the current parameters.
#[pyclass(name = "Pipeline", module = "gmem")]
struct PyPipeline {
    inner: Pipeline,
    train: TrainConfig,
}

impl PyPipeline {
    fn memories(&self, data: &[QaInstance]) -> PyResult<Vec<gmem_core::Memory>> {
        eval::build_memories(data, &self.inner, &RuleExtractor::standard()).map_err(py_err)
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (capacity=None, budget=None, tau=None, dim=None, chunk_len=None, overlap=None, per_chunk_cap=None, field_cap=None, config=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        capacity: Option<usize>,
        budget: Option<usize>,
        tau: Option<f64>,
        dim: Option<usize>,
        chunk_len: Option<usize>,
        overlap: Option<usize>,
        per_chunk_cap: Option<usize>,
        field_cap: Option<usize>,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let mut s = Settings::default();
        if let Some(text) = config {
            s.apply_text(text).map_err(py_err)?;
        }
        let b = &mut s.build;
        b.capacity = capacity.unwrap_or(b.capacity);
        b.chunk_len = chunk_len.unwrap_or(b.chunk_len);
        b.overlap = overlap.unwrap_or(b.overlap);
        b.per_chunk_cap = per_chunk_cap.unwrap_or(b.per_chunk_cap);
        b.field_cap = field_cap.unwrap_or(b.field_cap);
        s.budget = budget.unwrap_or(s.budget);
        s.tau = tau.unwrap_or(s.tau);
        s.dim = dim.unwrap_or(s.dim);
        s.validate().map_err(py_err)?;
        let inner = Pipeline { build: s.build, embedder: s.embedder(), retriever: s.retriever() };
        Ok(PyPipeline { inner, train: s.train })
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.build.capacity
    }

    #[setter]
    fn set_capacity(&mut self, capacity: usize) -> PyResult<()> {
        let build = gmem_core::BuildConfig { capacity, ..self.inner.build };
        build.validate().map_err(py_err)?;
        self.inner.build = build;
        Ok(())
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.retriever.budget
    }

    #[setter]
    fn set_budget(&mut self, budget: usize) {
        self.inner.retriever.budget = budget;
    }

    /// Builds a memory with the rule extractor.
    fn memorize(&self, py: Python<'_>, context: &str) -> PyResult<PyMemory> {
        let inner = py.detach(|| self.inner.memorize(context, &RuleExtractor::standard())).map_err(py_err)?;
        Ok(PyMemory { inner, build: self.inner.build })
    }

    fn retrieve(&self, memory: &PyMemory, question: &str) -> PyResult<PySubgraph> {
        let inner = memory.inner.retrieve(question, &self.inner.retriever, &self.inner.embedder).map_err(py_err)?;
        Ok(PySubgraph { inner })
    }

    /// Answers from a memory (or raw context) with `reasoner(prompt) -> str`.
    /// Returns `(answer, prompt)`.
    fn answer(&self, source: &Bound<'_, PyAny>, question: &str, reasoner: Py<PyAny>) -> PyResult<(String, String)> {
        let reasoner = CallableReasoner(reasoner);
        let answer = if let Ok(memory) = source.cast::<PyMemory>() {
            self.inner.answer_from_memory(&memory.get().inner, question, &reasoner)
        } else {
            let context: String = source.extract()?;
            self.inner.answer(&context, question, &RuleExtractor::standard(), &reasoner)
        }
        .map_err(py_err)?;
        Ok((answer.text, answer.prompt))
    }

    /// Answers one instance with the oracle reasoner, which is correct only
    /// when every gold edge was retrieved.
    fn answer_instance(&self, instance: &Bound<'_, PyAny>) -> PyResult<(String, bool)> {
        let inst: QaInstance = from_py(instance)?;
        let reasoner = MockReasoner::for_instance(&inst).map_err(py_err)?;
        let answer = self
            .inner
            .answer(&inst.context, &inst.question, &RuleExtractor::standard(), &reasoner)
            .map_err(py_err)?;
        let correct = eval::accuracy_match(&answer.text, &inst.answers);
        Ok((answer.text, correct))
    }

    /// Trains the retrieval parameters in place and returns the report.
    #[pyo3(signature = (instances, stage="stage2", learning_rate=None, epochs=None, batch_size=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        instances: &Bound<'py, PyAny>,
        stage: &str,
        learning_rate: Option<f64>,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = self::instances(instances)?;
        let mut cfg = self.train;
        cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
        cfg.epochs = epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
        cfg.seed = seed.unwrap_or(cfg.seed);
        let memories = self.memories(&data)?;
        let p = &self.inner;
        let features = data
            .iter()
            .zip(&memories)
            .map(|(i, m)| instance_features(i, &m.graph, &p.embedder))
            .collect::<gmem_core::Result<Vec<_>>>()
            .map_err(py_err)?;
        let (ep, rp, report) = py
            .detach(|| match stage {
                "stage2" => gmem_core::stage2_train(&features, &p.embedder, p.retriever.clone(), &cfg)
                    .map(|(rp, rep)| (p.embedder.clone(), rp, rep)),
                "stage3" => gmem_core::stage3_train(&features, p.embedder.clone(), p.retriever.clone(), &cfg),
                other => Err(Error::Config(format!("unknown stage {other:?}; expected stage2 or stage3"))),
            })
            .map_err(py_err)?;
        self.inner.embedder = ep;
        self.inner.retriever = rp;
        to_py(py, &report)
    }

    /// Accuracy, ROUGE-L and (for `learned`) recall over the instances.
    /// `paradigm` is one of learned, bfs, rag, full, none.
    #[pyo3(signature = (instances, paradigm="learned", rag_chunks=1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        instances: &Bound<'py, PyAny>,
        paradigm: &str,
        rag_chunks: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pd = match paradigm {
            "learned" => Paradigm::Learned,
            "bfs" => Paradigm::Bfs,
            "rag" => Paradigm::Rag { k_chunks: rag_chunks },
            "full" => Paradigm::FullGraph,
            "none" => Paradigm::ReasonerOnly,
            other => return Err(py_err(Error::Config(format!("unknown paradigm {other:?}")))),
        };
        let data = self::instances(instances)?;
        let memories = self.memories(&data)?;
        let report = eval::evaluate_paradigm(pd, &data, &memories, &self.inner).map_err(py_err)?;
        to_py(
            py,
            &serde_json::json!({
                "paradigm": pd.name(),
                "instances": report.len(),
                "accuracy": report.accuracy,
                "rouge_l": report.rouge_l,
                "recall": report.recall,
            }),
        )
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        persistence::save_checkpoint(&path, &self.inner.embedder, &self.inner.retriever).map_err(py_err)
    }

    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        let (ep, rp) = persistence::load_checkpoint(&path).map_err(py_err)?;
        self.inner.embedder = ep;
        self.inner.retriever = rp;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Pipeline(capacity={}, budget={}, tau={}, dim={})",
            self.inner.build.capacity,
            self.inner.retriever.budget,
            self.inner.retriever.temperature,
            self.inner.retriever.dim()
        )
    }
}

/// Generates `n` synthetic instances as dicts.
#[pyfunction]
#[pyo3(signature = (n, seed=1, facts=12, tokens=3000, hops=2))]
fn generate<'py>(py: Python<'py>, n: usize, seed: u64, facts: usize, tokens: usize, hops: usize) -> PyResult<Bound<'py, PyAny>> {
    let cfg = GenConfig { facts, target_tokens: tokens, hop_depth: hops, ..GenConfig::standard(seed) };
    to_py(py, &synth::generate_suite(n, &cfg).map_err(py_err)?)
}

/// Formats `(head, relation, tail)` tuples as an evidence block.
#[pyfunction]
fn serialize(triples: &Bound<'_, PyList>) -> PyResult<String> {
    let triples = triples
        .iter()
        .map(|t| t.extract::<(String, String, String)>().map(|(h, r, t)| Triple::new(h, r, t)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(gmem_core::serialize(triples.iter()).to_string())
}

#[pyfunction]
fn read_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &persistence::read_dataset(&path).map_err(py_err)?)
}

#[pyfunction]
fn write_dataset(path: PathBuf, instances: &Bound<'_, PyAny>) -> PyResult<()> {
    persistence::write_dataset(&path, &self::instances(instances)?).map_err(py_err)
}

#[pymodule]
fn gmem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GmemError", m.py().get_type::<GmemError>())?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyMemory>()?;
    m.add_class::<PySubgraph>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(serialize, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    Ok(())
}
