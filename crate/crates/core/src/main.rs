use std::fs;
use std::io::{self, BufWriter};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use convkg::answer::ScoringMethod;
use convkg::exec::Execution;
use convkg::index::{build_index, read_corpus};
use convkg::interactive::converse;
use convkg::metrics::{evaluate_run, load_qrels, EvalConfig, ReferenceSet};
use convkg::pipeline::{read_run, read_topics, write_run, LinkerConfig, Pipeline, PipelineConfig, TurnOverrides};

#[derive(Parser)]
#[command(name = "convkg", version, about = "Conversational passage search with entity-graph answer generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a JSONL corpus of {"id", "text"} records.
    Index {
        /// Corpus file (JSONL of {"id", "text"}).
        #[arg(long)]
        corpus: PathBuf,
        /// Directory to write the index into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every topic of a topics file and write a run file.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Topics file (JSONL of {"topic", "turns"}).
        #[arg(long)]
        topics: PathBuf,
        /// Run file to write (JSONL, one record per turn).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run file against relevance judgements.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Graded judgements, one `topic_turn Q0 passage grade` per line.
        #[arg(long)]
        qrels: PathBuf,
        /// Precomputed references (JSONL of {"topic", "turn", "passages"}).
        #[arg(long, conflicts_with = "corpus")]
        references: Option<PathBuf>,
        /// Build references from the corpus and the qrels instead.
        #[arg(long, required_unless_present = "references")]
        corpus: Option<PathBuf>,
        /// Where to save references built from `--corpus`.
        #[arg(long, requires = "corpus")]
        write_references: Option<PathBuf>,
        /// Per-turn metrics table.
        #[arg(long)]
        out_csv: PathBuf,
        /// Micro and macro averages.
        #[arg(long)]
        out_json: PathBuf,
        #[arg(long, default_value_t = 3)]
        ndcg_depth: usize,
        /// Lowest grade counted as relevant for MAP and MRR.
        #[arg(long, default_value_t = 1)]
        relevance_cutoff: u8,
        #[arg(long)]
        sequential: bool,
    },
    /// Interactive conversation on stdin.
    Converse {
        #[command(flatten)]
        config: ConfigArgs,
        /// Topic label written into the records.
        #[arg(long, default_value = "interactive")]
        topic: String,
    },
    /// Serve the JSON HTTP API.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

/// A config file plus flags that override its keys.
#[derive(Args)]
struct ConfigArgs {
    /// JSON pipeline config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Index directory written by `convkg index`.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Knowledge base of entity inlinks (JSONL).
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Link entities with a local gazetteer (JSONL).
    #[arg(long, conflicts_with = "spotlight")]
    gazetteer: Option<PathBuf>,
    /// Link entities with a Spotlight annotate endpoint.
    #[arg(long)]
    spotlight: Option<String>,
    /// Minimum linker confidence.
    #[arg(long)]
    confidence: Option<f64>,
    /// Passage scoring: O, ER or EG.
    #[arg(long)]
    method: Option<ScoringMethod>,
    /// Weight of the query column in the entity map.
    #[arg(long)]
    gamma: Option<f64>,
    /// Edge cutoff for the entity graph.
    #[arg(long)]
    tau: Option<f64>,
    /// Minimum answer length in words.
    #[arg(long)]
    min_length: Option<usize>,
    /// Maximum answer length in words.
    #[arg(long)]
    max_length: Option<usize>,
    /// Prefix the summarizer input with the rewritten query.
    #[arg(long)]
    include_query: Option<bool>,
    /// Dirichlet smoothing parameter.
    #[arg(long)]
    mu: Option<f64>,
    /// First-stage retrieval depth.
    #[arg(long)]
    k: Option<usize>,
    /// Number of first-stage results sent to the re-ranker.
    #[arg(long)]
    rerank_depth: Option<usize>,
    /// Query rewriting service.
    #[arg(long)]
    rewriter_url: Option<String>,
    /// Re-ranking service.
    #[arg(long)]
    reranker_url: Option<String>,
    /// Summarization service.
    #[arg(long)]
    summarizer_url: Option<String>,
    /// Fall back to the stubs (and entity-free text) when a service fails.
    #[arg(long)]
    fallback_to_stubs: bool,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.index {
            cfg.index = v.clone();
        }
        if let Some(v) = &self.kb {
            cfg.kb = Some(v.clone());
        }
        if let Some(path) = &self.gazetteer {
            cfg.linker = Some(LinkerConfig::Gazetteer { path: path.clone() });
        }
        if let Some(endpoint) = &self.spotlight {
            cfg.linker = Some(LinkerConfig::Spotlight { endpoint: endpoint.clone() });
        }
        if let Some(v) = self.confidence {
            cfg.confidence = v;
        }
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.gamma {
            cfg.graph.gamma = v;
        }
        if let Some(v) = self.tau {
            cfg.graph.tau = v;
        }
        if let Some(v) = self.min_length {
            cfg.generation.min_length = v;
        }
        if let Some(v) = self.max_length {
            cfg.generation.max_length = Some(v);
        }
        if let Some(v) = self.include_query {
            cfg.generation.include_query = v;
        }
        if let Some(v) = self.mu {
            cfg.retrieval.mu = v;
        }
        if let Some(v) = self.k {
            cfg.retrieval.k = v;
        }
        if let Some(v) = self.rerank_depth {
            cfg.retrieval.rerank_depth = v;
        }
        for (slot, url) in [
            (&mut cfg.rewriter, &self.rewriter_url),
            (&mut cfg.reranker, &self.reranker_url),
            (&mut cfg.summarizer, &self.summarizer_url),
        ] {
            if let Some(u) = url {
                slot.endpoint = Some(u.clone());
            }
            slot.fallback_to_stub |= self.fallback_to_stubs;
        }
        cfg.linker_fallback |= self.fallback_to_stubs;
        Ok(cfg)
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let cfg = self.resolve()?;
        let pipeline = Pipeline::from_config(&cfg)?;
        Ok(pipeline.with_execution(self.execution()))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Index { corpus, out } => {
            let passages = read_corpus(&corpus)?;
            let index = build_index(passages)?;
            let manifest = index.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Run { config, topics, out } => {
            let pipeline = config.pipeline()?;
            let topics = read_topics(&topics)?;
            let records = pipeline.run_topics(&topics)?;
            write_run(&out, &records)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Eval {
            run,
            qrels,
            references,
            corpus,
            write_references,
            out_csv,
            out_json,
            ndcg_depth,
            relevance_cutoff,
            sequential,
        } => {
            let records = read_run(&run)?;
            let qrels = load_qrels(&qrels)?;
            let refs = match (references, corpus) {
                (Some(path), _) => ReferenceSet::read_jsonl(&path)?,
                (None, Some(path)) => {
                    let refs = ReferenceSet::build(&qrels, &read_corpus(&path)?);
                    if let Some(out) = write_references {
                        refs.write_jsonl(&out)?;
                    }
                    refs
                }
                (None, None) => bail!("one of --references or --corpus is required"),
            };
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let config = EvalConfig { ndcg_depth, relevance_cutoff };
            let report = evaluate_run(&records, &qrels, &refs, &config, exec)?;
            let file = fs::File::create(&out_csv).with_context(|| format!("creating {}", out_csv.display()))?;
            report.write_csv(BufWriter::new(file))?;
            let summary = report.summary_json();
            write_json(&out_json, &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary["macro"])?);
        }
        Command::Converse { config, topic } => {
            let pipeline = config.pipeline()?;
            let stdin = io::stdin();
            converse(&pipeline, &topic, &TurnOverrides::default(), stdin.lock(), io::stdout().lock())?;
        }
        Command::Serve { config, addr } => {
            let pipeline = Arc::new(config.pipeline()?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                convkg::server::serve(listener, pipeline).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
