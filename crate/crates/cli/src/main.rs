use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmem_core::eval::{self, Paradigm, TimingConfig, TIMING_LENGTHS};
use gmem_core::extraction::Extractor;
use gmem_core::persistence::{self, write_atomic};
use gmem_core::synth::{self, GenConfig};
use gmem_core::trainer::instance_features;
use gmem_core::{
    Error, MockReasoner, Pipeline, QaInstance, Reasoner, RemoteExtractor, RemoteReasoner, Result, RuleExtractor,
    ServiceClient, ServiceConfig, Settings,
};
use serde_json::json;

const AFTER_HELP: &str = "\
Settings are resolved as: command-line flag > --config file > built-in default.
The config file holds one `key = value` per line (`#` comments). Keys:
  chunk_len overlap per_chunk_cap capacity field_cap dim tau budget
  hash_seed seed learning_rate epochs batch_size builder_steps joint_steps
A checkpoint passed with --params supplies d, tau, k and the hash seed;
explicit --budget and --tau flags still win.
Remote services are configured with GMEM_ENDPOINT, GMEM_MODEL and GMEM_API_KEY.
Errors are printed to stderr as one JSON object and exit with status 1.";

#[derive(Parser, Debug)]
#[command(name = "gmem", version, about = "Capacity-bounded triple memory with budgeted subgraph retrieval", after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Global {
    /// Key-value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Global edge capacity M.
    #[arg(long, short = 'M', global = true)]
    capacity: Option<usize>,
    /// Retrieval budget k.
    #[arg(long, short = 'k', global = true)]
    budget: Option<usize>,
    /// Softmax temperature.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Embedding dimension d.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    chunk_len: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
    /// Per-chunk candidate budget.
    #[arg(long, global = true)]
    per_chunk_cap: Option<usize>,
    /// Maximum tokens per triple field.
    #[arg(long, global = true)]
    field_cap: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Extract triples with the rule grammar or a remote model.
    #[arg(long, global = true, value_enum, default_value_t = ExtractorKind::Rule)]
    extractor: ExtractorKind,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum)]
enum ExtractorKind {
    #[default]
    Rule,
    Remote,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a memory file from a context document.
    Build {
        /// Plain-text context.
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose edge map embeds the edges.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Retrieve the budgeted subgraph for a question.
    Retrieve {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build, retrieve and answer in one step.
    Answer {
        /// Plain-text context (answered by the remote reasoner).
        #[arg(long, requires = "question", conflicts_with = "dataset")]
        context: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        /// Dataset instance to answer with the mock reasoner.
        #[arg(long, requires = "index")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train retrieval parameters.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoint (identity maps when omitted).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the training report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a dataset with the mock reasoner.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ParadigmArg::Learned)]
        paradigm: ParadigmArg,
        /// Chunks retrieved by the chunk-RAG baseline.
        #[arg(long, default_value_t = 1)]
        rag_chunks: usize,
        /// Per-instance CSV (single paradigm only).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    /// Generate a synthetic JSONL suite.
    Gen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        facts: usize,
        #[arg(long, default_value_t = 3000)]
        tokens: usize,
        #[arg(long, default_value_t = 2)]
        hops: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum Bench {
    /// Build and answer latency across context lengths.
    Timing {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Learned-retrieval accuracy across capacities.
    Capacity {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,150,200")]
        capacities: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Dot,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Stage2,
    Stage3,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ParadigmArg {
    Learned,
    Bfs,
    Rag,
    Full,
    None,
    All,
}

impl Global {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.clone(), reason: e.to_string() })?;
            s.apply_text(&text)?;
        }
        let b = &mut s.build;
        set(&mut b.capacity, self.capacity);
        set(&mut b.chunk_len, self.chunk_len);
        set(&mut b.overlap, self.overlap);
        set(&mut b.per_chunk_cap, self.per_chunk_cap);
        set(&mut b.field_cap, self.field_cap);
        set(&mut s.budget, self.budget);
        set(&mut s.tau, self.tau);
        set(&mut s.dim, self.dim);
        set(&mut s.train.seed, self.seed);
        set(&mut s.train.learning_rate, self.learning_rate);
        set(&mut s.train.epochs, self.epochs);
        set(&mut s.train.batch_size, self.batch_size);
        s.validate()?;
        Ok(s)
    }

    /// Pipeline from settings, with checkpoint parameters when given.
    fn pipeline(&self, settings: &Settings, params: Option<&Path>) -> Result<Pipeline> {
        let mut p = Pipeline { build: settings.build, embedder: settings.embedder(), retriever: settings.retriever() };
        if let Some(path) = params {
            let (ep, mut rp) = persistence::load_checkpoint(path)?;
            set(&mut rp.budget, self.budget);
            set(&mut rp.temperature, self.tau);
            p.embedder = ep;
            p.retriever = rp;
        }
        Ok(p)
    }

    fn extractor(&self) -> Box<dyn Extractor> {
        match self.extractor {
            ExtractorKind::Rule => Box::new(RuleExtractor::standard()),
            ExtractorKind::Remote => Box::new(RemoteExtractor::new(ServiceClient::new(ServiceConfig::from_env()))),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn paradigms(arg: ParadigmArg, rag_chunks: usize) -> Vec<Paradigm> {
    match arg {
        ParadigmArg::Learned => vec![Paradigm::Learned],
        ParadigmArg::Bfs => vec![Paradigm::Bfs],
        ParadigmArg::Rag => vec![Paradigm::Rag { k_chunks: rag_chunks }],
        ParadigmArg::Full => vec![Paradigm::FullGraph],
        ParadigmArg::None => vec![Paradigm::ReasonerOnly],
        ParadigmArg::All => vec![
            Paradigm::ReasonerOnly,
            Paradigm::FullGraph,
            Paradigm::Bfs,
            Paradigm::Rag { k_chunks: rag_chunks },
            Paradigm::Learned,
        ],
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let settings = g.settings()?;
    match cli.command {
        Command::Gen { n, facts, tokens, hops, out } => {
            let cfg = GenConfig {
                seed: settings.train.seed,
                target_tokens: tokens,
                facts,
                hop_depth: hops,
                ..GenConfig::standard(settings.train.seed)
            };
            let suite = synth::generate_suite(n, &cfg)?;
            persistence::write_dataset(&out, &suite)?;
            println!("{}", json!({"instances": suite.len(), "out": out}));
        }
        Command::Build { context, out, params } => {
            let p = g.pipeline(&settings, params.as_deref())?;
            let memory = p.memorize(&read_text(&context)?, g.extractor().as_ref())?;
            persistence::save_memory(&out, &memory.graph, &memory.embeddings, &p.build)?;
            println!("{}", serde_json::to_string(&memory.report)?);
        }
        Command::Retrieve { memory, question, params, format, out } => {
            let p = g.pipeline(&settings, params.as_deref())?;
            let (graph, embeddings, _) = persistence::load_memory(&memory)?;
            let sub = gmem_core::retrieve(&graph, &embeddings, &question, &p.retriever, &p.embedder)?;
            let text = match format {
                Format::Text => format!("{}\n", gmem_core::serialize(sub.triples())),
                Format::Dot => persistence::to_dot(&sub),
            };
            emit(&text, out.as_deref())?;
        }
        Command::Answer { context, question, dataset, index, params } => {
            let p = g.pipeline(&settings, params.as_deref())?;
            let extractor = g.extractor();
            let (context, question, reasoner, gold): (String, String, Box<dyn Reasoner>, Option<Vec<String>>) =
                match (context, dataset) {
                    (Some(path), _) => {
                        let reasoner = RemoteReasoner::new(ServiceClient::new(ServiceConfig::from_env()));
                        (read_text(&path)?, question.unwrap_or_default(), Box::new(reasoner), None)
                    }
                    (None, Some(path)) => {
                        let data = persistence::read_dataset(&path)?;
                        let i = index.unwrap_or(0);
                        let inst: QaInstance = data
                            .get(i)
                            .cloned()
                            .ok_or_else(|| Error::Config(format!("index {i} out of range for {} instances", data.len())))?;
                        let reasoner = MockReasoner::for_instance(&inst)?;
                        (inst.context, inst.question, Box::new(reasoner), Some(inst.answers))
                    }
                    (None, None) => return Err(Error::Config("answer needs --context or --dataset".into())),
                };
            let answer = p.answer(&context, &question, extractor.as_ref(), reasoner.as_ref())?;
            let correct = gold.as_ref().map(|g| eval::accuracy_match(&answer.text, g));
            println!(
                "{}",
                json!({"answer": answer.text, "edges": answer.subgraph.len(), "correct": correct, "prompt": answer.prompt})
            );
        }
        Command::Train { stage, dataset, out, init, report } => {
            let p = g.pipeline(&settings, init.as_deref())?;
            let data = persistence::read_dataset(&dataset)?;
            let memories = eval::build_memories(&data, &p, g.extractor().as_ref())?;
            let features = data
                .iter()
                .zip(&memories)
                .map(|(i, m)| instance_features(i, &m.graph, &p.embedder))
                .collect::<Result<Vec<_>>>()?;
            let (ep, rp, rep) = match stage {
                Stage::Stage2 => {
                    let (rp, rep) = gmem_core::stage2_train(&features, &p.embedder, p.retriever.clone(), &settings.train)?;
                    (p.embedder.clone(), rp, rep)
                }
                Stage::Stage3 => gmem_core::stage3_train(&features, p.embedder.clone(), p.retriever.clone(), &settings.train)?,
            };
            persistence::save_checkpoint(&out, &ep, &rp)?;
            let summary = json!({
                "initial_recall": rep.initial_recall,
                "final_recall": rep.final_recall(),
                "final_loss": rep.losses.last(),
                "checksum": rep.checksum,
            });
            if let Some(path) = report {
                write_atomic(&path, serde_json::to_string_pretty(&rep)?.as_bytes())?;
            }
            println!("{summary}");
        }
        Command::Eval { dataset, params, paradigm, rag_chunks, csv } => {
            let p = g.pipeline(&settings, params.as_deref())?;
            let data = persistence::read_dataset(&dataset)?;
            let memories = eval::build_memories(&data, &p, g.extractor().as_ref())?;
            let chosen = paradigms(paradigm, rag_chunks);
            let mut rows = Vec::new();
            for pd in &chosen {
                let report = eval::evaluate_paradigm(*pd, &data, &memories, &p)?;
                if let (Some(path), 1) = (&csv, chosen.len()) {
                    write_atomic(path, report.to_csv().as_bytes())?;
                }
                rows.push(eval::AblationRow { paradigm: *pd, report });
            }
            if chosen.len() == 1 {
                let r = &rows[0].report;
                println!(
                    "{}",
                    json!({"paradigm": chosen[0].name(), "instances": r.len(), "accuracy": r.accuracy, "rouge_l": r.rouge_l, "recall": r.recall})
                );
            } else {
                print!("{}", eval::ablation_table(&rows));
            }
        }
        Command::Bench { which } => match which {
            Bench::Timing { samples, repeats, lengths, csv } => {
                let p = g.pipeline(&settings, None)?;
                let cfg = TimingConfig { samples, answer_repeats: repeats, seed: settings.train.seed, ..TimingConfig::default() };
                let lengths = lengths.unwrap_or_else(|| TIMING_LENGTHS.to_vec());
                let rows = eval::timing_harness(&lengths, &cfg, &p, g.extractor().as_ref())?;
                if let Some(path) = csv {
                    write_atomic(&path, eval::timing_csv(&rows).as_bytes())?;
                }
                print!("{}", eval::timing_table(&rows));
            }
            Bench::Capacity { dataset, params, capacities, csv } => {
                let p = g.pipeline(&settings, params.as_deref())?;
                let data = persistence::read_dataset(&dataset)?;
                let rows = eval::capacity_sweep(&data, &capacities, &p, g.extractor().as_ref())?;
                if let Some(path) = csv {
                    write_atomic(&path, eval::sweep_csv(&rows).as_bytes())?;
                }
                print!("{}", eval::sweep_table(&rows));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
