//! The per-turn pipeline: rewrite, retrieve, re-rank, link, select, generate.
//!
//! [`Pipeline::run_turn`] is the single implementation behind the batch
//! runner, the interactive loop and the HTTP service.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    build_summarizer_input, conversation_graph, generate_answer, select_passages, AnswerError, Candidate,
    GenerationConfig, ScoringMethod, StubSummarizer, SummarizerAdapter,
};
use crate::conversation::{
    build_rewrite_prompt_capped, rerank, Conversation, IdentityRewriter, OverlapReranker, RankedList, RerankError,
    RerankerAdapter, RewriterAdapter, TurnOutputs, PROMPT_TOKEN_BUDGET,
};
use crate::exec::Execution;
use crate::graph::{export_graph, GraphDocument, GraphError, GraphParams};
use crate::index::{IndexError, InvertedIndex, RetrievalParams};
use crate::linking::{
    entity_set, link, load_kb, EntityMention, Gazetteer, KnowledgeBaseStore, LinkError, Linker, SpotlightClient,
    DEFAULT_CONFIDENCE,
};
use crate::remote::{AdapterError, HttpReranker, HttpRewriter, HttpSummarizer, JsonEndpoint};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("turn {turn}: rewriter failed: {source}")]
    Rewrite {
        turn: usize,
        #[source]
        source: AdapterError,
    },
    #[error("{path}:{line}: {message}")]
    Topics { path: String, line: usize, message: String },
    #[error("topics file {0} holds no topics")]
    NoTopics(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

// --- configuration ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkerConfig {
    Gazetteer { path: PathBuf },
    Spotlight { endpoint: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// `None` selects the built-in stub.
    pub endpoint: Option<String>,
    /// Use the stub when the service fails instead of failing the turn.
    pub fallback_to_stub: bool,
}

/// Everything needed to build a [`Pipeline`], as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub index: PathBuf,
    /// Optional; without it every relatedness score is 0.
    pub kb: Option<PathBuf>,
    pub linker: Option<LinkerConfig>,
    pub confidence: f64,
    /// Treat text as entity-free when the linker fails.
    pub linker_fallback: bool,
    pub rewriter: AdapterConfig,
    pub reranker: AdapterConfig,
    pub summarizer: AdapterConfig,
    pub timeout_secs: u64,
    pub retrieval: RetrievalParams,
    pub graph: GraphParams,
    pub generation: GenerationConfig,
    pub method: ScoringMethod,
    pub export_top_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            index: PathBuf::from("index"),
            kb: None,
            linker: None,
            confidence: DEFAULT_CONFIDENCE,
            linker_fallback: false,
            rewriter: AdapterConfig::default(),
            reranker: AdapterConfig::default(),
            summarizer: AdapterConfig::default(),
            timeout_secs: 30,
            retrieval: RetrievalParams::default(),
            graph: GraphParams::default(),
            generation: GenerationConfig::default(),
            method: ScoringMethod::EG,
            export_top_fraction: 0.25,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(PipelineError::Config(format!(
                "schema_version {} not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.index);
        if let Some(kb) = &mut self.kb {
            fix(kb);
        }
        if let Some(LinkerConfig::Gazetteer { path }) = &mut self.linker {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.retrieval.validate()?;
        self.graph.validate()?;
        self.generation.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PipelineError::Config(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if !(0.0..=1.0).contains(&self.export_top_fraction) {
            return Err(PipelineError::Config("export_top_fraction outside [0, 1]".into()));
        }
        for (name, a) in [("rewriter", &self.rewriter), ("reranker", &self.reranker), ("summarizer", &self.summarizer)]
        {
            if let Some(url) = &a.endpoint {
                check_url(name, url)?;
            }
        }
        if let Some(LinkerConfig::Spotlight { endpoint }) = &self.linker {
            check_url("linker", endpoint)?;
        }
        Ok(())
    }
}

fn check_url(name: &str, url: &str) -> Result<(), PipelineError> {
    let ok = url
        .strip_prefix("http://")
        .or_else(|| url.strip_prefix("https://"))
        .is_some_and(|rest| !rest.is_empty() && !rest.contains(char::is_whitespace));
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{name} endpoint `{url}` is not an http(s) URL")))
    }
}

/// Per-turn knobs that may differ from the configured defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurnOverrides {
    pub gamma: Option<f64>,
    pub method: Option<ScoringMethod>,
    pub min_length: Option<usize>,
    pub include_query: Option<bool>,
}

impl TurnOverrides {
    /// `other` wins where set.
    pub fn merged(self, other: TurnOverrides) -> TurnOverrides {
        TurnOverrides {
            gamma: other.gamma.or(self.gamma),
            method: other.method.or(self.method),
            min_length: other.min_length.or(self.min_length),
            include_query: other.include_query.or(self.include_query),
        }
    }
}

/// Resolved selection and generation settings for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub method: ScoringMethod,
    pub graph: GraphParams,
    pub generation: GenerationConfig,
}

impl Settings {
    pub fn apply(&self, o: &TurnOverrides) -> Result<Settings, PipelineError> {
        let mut s = self.clone();
        if let Some(g) = o.gamma {
            s.graph.gamma = g;
        }
        if let Some(m) = o.method {
            s.method = m;
        }
        if let Some(l) = o.min_length {
            s.generation.min_length = l;
        }
        if let Some(q) = o.include_query {
            s.generation.include_query = q;
        }
        s.graph.validate()?;
        s.generation.validate()?;
        Ok(s)
    }
}

// --- records ---

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub topic: String,
    pub turn: usize,
    #[serde(default)]
    pub raw_query: String,
    #[serde(default)]
    pub prompt: String,
    pub rewritten_query: String,
    pub ranked: Vec<String>,
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default)]
    pub method: ScoringMethod,
    pub answer: String,
    pub answer_words: usize,
    /// Stages that fell back to a stub or to entity-free text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<String>,
}

impl RunRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("run record serializes")
    }
}

pub fn write_run(path: &Path, records: &[RunRecord]) -> Result<(), PipelineError> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(r.to_line().as_bytes());
        out.push(b'\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_run(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    read_jsonl(path)
}

/// One topic of a topics file: `{"topic": "...", "turns": ["query", ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub topic: String,
    pub turns: Vec<String>,
}

pub fn read_topics(path: &Path) -> Result<Vec<Topic>, PipelineError> {
    let topics: Vec<Topic> = read_jsonl(path)?;
    if topics.is_empty() {
        return Err(PipelineError::NoTopics(path.display().to_string()));
    }
    Ok(topics)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Topics {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// --- turn state ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub text: String,
    pub rerank_score: f64,
    /// Selection score under the turn's method; `null` when ER had no entities.
    pub score: Option<f64>,
    pub selected: bool,
    pub entities: Vec<EntityMention>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub rewrite_ms: f64,
    pub retrieve_ms: f64,
    pub rerank_ms: f64,
    pub link_ms: f64,
    pub select_ms: f64,
    pub generate_ms: f64,
}

/// Selection and answer for a set of cached candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub method: ScoringMethod,
    pub gamma: f64,
    pub selected: Vec<String>,
    pub passages: Vec<CandidateView>,
    pub graph: GraphDocument,
    pub salient_entities: Vec<(String, f64)>,
    pub summarizer_input: String,
    pub answer: String,
    pub answer_words: usize,
    pub fallbacks: Vec<String>,
}

/// What a turn computed, kept so selection can be redone without retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnState {
    pub turn: usize,
    pub raw_query: String,
    pub prompt: String,
    pub rewritten_query: String,
    pub first_stage: RankedList,
    pub reranked: RankedList,
    pub candidates: Vec<Candidate>,
    pub mentions: Vec<Vec<EntityMention>>,
    pub query_mentions: Vec<EntityMention>,
    /// Query entities of this and all earlier turns.
    pub query_entities: BTreeSet<String>,
    pub settings: Settings,
    pub stage_fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub state: TurnState,
    pub composition: Composition,
    pub record: RunRecord,
    pub timings: Timings,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

// --- pipeline ---

pub struct Pipeline {
    index: Arc<InvertedIndex>,
    kb: Arc<KnowledgeBaseStore>,
    linker: Option<Box<dyn Linker>>,
    rewriter: Box<dyn RewriterAdapter>,
    reranker: Box<dyn RerankerAdapter>,
    summarizer: Box<dyn SummarizerAdapter>,
    fallback: Fallbacks,
    confidence: f64,
    retrieval: RetrievalParams,
    settings: Settings,
    export_top_fraction: f64,
    exec: Execution,
}

#[derive(Debug, Clone, Copy, Default)]
struct Fallbacks {
    rewriter: bool,
    reranker: bool,
    summarizer: bool,
    linker: bool,
}

/// Mentions found in one candidate passage plus the fallbacks it triggered.
type LinkedPassage = (Vec<EntityMention>, Vec<String>);

/// Assembles a [`Pipeline`] from in-memory parts; unset adapters are stubs.
pub struct PipelineBuilder {
    index: Arc<InvertedIndex>,
    kb: Arc<KnowledgeBaseStore>,
    linker: Option<Box<dyn Linker>>,
    rewriter: Box<dyn RewriterAdapter>,
    reranker: Box<dyn RerankerAdapter>,
    summarizer: Box<dyn SummarizerAdapter>,
    fallback: Fallbacks,
    config: PipelineConfig,
    exec: Execution,
}

impl PipelineBuilder {
    pub fn new(index: Arc<InvertedIndex>) -> Self {
        Self {
            index,
            kb: Arc::new(KnowledgeBaseStore::default()),
            linker: None,
            rewriter: Box::new(IdentityRewriter),
            reranker: Box::new(OverlapReranker),
            summarizer: Box::new(StubSummarizer),
            fallback: Fallbacks::default(),
            config: PipelineConfig::default(),
            exec: Execution::default(),
        }
    }

    pub fn kb(mut self, kb: Arc<KnowledgeBaseStore>) -> Self {
        self.kb = kb;
        self
    }

    pub fn linker(mut self, linker: Box<dyn Linker>) -> Self {
        self.linker = Some(linker);
        self
    }

    pub fn rewriter(mut self, r: Box<dyn RewriterAdapter>) -> Self {
        self.rewriter = r;
        self
    }

    pub fn reranker(mut self, r: Box<dyn RerankerAdapter>) -> Self {
        self.reranker = r;
        self
    }

    pub fn summarizer(mut self, s: Box<dyn SummarizerAdapter>) -> Self {
        self.summarizer = s;
        self
    }

    /// Numeric settings and fallback flags; paths and endpoints are ignored.
    pub fn config(mut self, config: PipelineConfig) -> Self {
        self.fallback = Fallbacks {
            rewriter: config.rewriter.fallback_to_stub,
            reranker: config.reranker.fallback_to_stub,
            summarizer: config.summarizer.fallback_to_stub,
            linker: config.linker_fallback,
        };
        self.config = config;
        self
    }

    pub fn execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn build(self) -> Result<Pipeline, PipelineError> {
        self.config.validate()?;
        Ok(Pipeline {
            index: self.index,
            kb: self.kb,
            linker: self.linker,
            rewriter: self.rewriter,
            reranker: self.reranker,
            summarizer: self.summarizer,
            fallback: self.fallback,
            confidence: self.config.confidence,
            retrieval: self.config.retrieval,
            settings: Settings {
                method: self.config.method,
                graph: self.config.graph,
                generation: self.config.generation.clone(),
            },
            export_top_fraction: self.config.export_top_fraction,
            exec: self.exec,
        })
    }
}

impl Pipeline {
    /// Loads the index, KB, linker and adapters named in `config`.
    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let index = Arc::new(InvertedIndex::load(&config.index)?);
        let kb = match &config.kb {
            Some(p) => load_kb(p)?,
            None => KnowledgeBaseStore::default(),
        };
        let timeout = Duration::from_secs(config.timeout_secs);
        let endpoint = |url: &str| JsonEndpoint::new(url, timeout).map_err(|e| PipelineError::Config(e.to_string()));
        let mut builder = PipelineBuilder::new(index).kb(Arc::new(kb)).config(config.clone());
        match &config.linker {
            Some(LinkerConfig::Gazetteer { path }) => builder = builder.linker(Box::new(Gazetteer::load(path)?)),
            Some(LinkerConfig::Spotlight { endpoint }) => {
                builder = builder.linker(Box::new(SpotlightClient::new(endpoint.clone(), timeout)?))
            }
            None => {}
        }
        if let Some(url) = &config.rewriter.endpoint {
            builder = builder.rewriter(Box::new(HttpRewriter(endpoint(url)?)));
        }
        if let Some(url) = &config.reranker.endpoint {
            builder = builder.reranker(Box::new(HttpReranker(endpoint(url)?)));
        }
        if let Some(url) = &config.summarizer.endpoint {
            builder = builder.summarizer(Box::new(HttpSummarizer(endpoint(url)?)));
        }
        builder.build()
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn link_text(
        &self,
        text: &str,
        fallbacks: &mut Vec<String>,
        what: &str,
    ) -> Result<Vec<EntityMention>, PipelineError> {
        let Some(linker) = &self.linker else {
            return Ok(Vec::new());
        };
        match link(text, linker.as_ref(), self.confidence) {
            Ok(m) => Ok(m),
            Err(e) if self.fallback.linker => {
                log::warn!("linking {what} failed, treating it as entity-free: {e}");
                fallbacks.push(format!("linker:{what}"));
                Ok(Vec::new())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Runs one turn and appends it to `conversation`.
    pub fn run_turn(
        &self,
        conversation: &mut Conversation,
        raw_query: &str,
        overrides: &TurnOverrides,
    ) -> Result<TurnResult, PipelineError> {
        let settings = self.settings.apply(overrides)?;
        let turn = conversation.next_index();
        let mut fallbacks = Vec::new();
        let mut timings = Timings::default();

        let t = Instant::now();
        let history: Vec<(String, String)> = conversation
            .turns
            .iter()
            .map(|t| {
                let top = t
                    .reranked
                    .entries()
                    .first()
                    .and_then(|(id, _)| self.index.passage(id))
                    .map(|p| p.text.clone())
                    .unwrap_or_default();
                (t.raw_query.clone(), top)
            })
            .collect();
        let prompt = build_rewrite_prompt_capped(&history, raw_query, PROMPT_TOKEN_BUDGET);
        let rewritten_query = if history.is_empty() {
            raw_query.to_string()
        } else {
            match self.rewriter.rewrite(&prompt) {
                Ok(q) if !q.trim().is_empty() => q,
                Ok(_) if self.fallback.rewriter => {
                    fallbacks.push("rewriter".into());
                    raw_query.to_string()
                }
                Ok(_) => {
                    return Err(PipelineError::Rewrite { turn, source: AdapterError::Invalid("empty rewrite".into()) })
                }
                Err(e) if self.fallback.rewriter => {
                    log::warn!("turn {turn}: rewriter failed, using the raw query: {e}");
                    fallbacks.push("rewriter".into());
                    IdentityRewriter.rewrite(&prompt).unwrap_or_else(|_| raw_query.to_string())
                }
                Err(source) => return Err(PipelineError::Rewrite { turn, source }),
            }
        };
        timings.rewrite_ms = ms(t.elapsed());

        let t = Instant::now();
        let first_stage = self.index.retrieve_with(&rewritten_query, &self.retrieval, self.exec)?;
        timings.retrieve_ms = ms(t.elapsed());

        let t = Instant::now();
        let depth = self.retrieval.rerank_depth.min(first_stage.len());
        let lookup = |id: &str| self.index.passage(id).map(|p| p.text.as_str());
        let reranked = match rerank(turn, &rewritten_query, &first_stage, lookup, self.reranker.as_ref(), depth) {
            Ok(r) => r,
            Err(e @ RerankError::Adapter { .. }) if self.fallback.reranker => {
                log::warn!("{e}; keeping first-stage order");
                fallbacks.push("reranker".into());
                first_stage.truncated(depth)
            }
            Err(e) => return Err(e.into()),
        };
        timings.rerank_ms = ms(t.elapsed());

        let t = Instant::now();
        let query_mentions = self.link_text(&rewritten_query, &mut fallbacks, "query")?;
        let linked: Vec<Result<LinkedPassage, PipelineError>> = self.exec.map(reranked.entries(), |(id, _)| {
            let mut local = Vec::new();
            let text = self.index.passage(id).map(|p| p.text.as_str()).unwrap_or_default();
            self.link_text(text, &mut local, id).map(|m| (m, local))
        });
        let mut mentions = Vec::with_capacity(linked.len());
        for r in linked {
            let (m, local) = r?;
            fallbacks.extend(local);
            mentions.push(m);
        }
        let candidates: Vec<Candidate> = reranked
            .entries()
            .iter()
            .zip(&mentions)
            .map(|((id, score), m)| Candidate {
                id: id.clone(),
                text: self.index.passage(id).map(|p| p.text.clone()).unwrap_or_default(),
                rerank_score: *score,
                entities: entity_set(m),
            })
            .collect();
        let current_entities = entity_set(&query_mentions);
        let mut query_entities = conversation.query_entity_history.clone();
        query_entities.extend(current_entities.iter().cloned());
        timings.link_ms = ms(t.elapsed());

        let state = TurnState {
            turn,
            raw_query: raw_query.to_string(),
            prompt,
            rewritten_query,
            first_stage,
            reranked,
            candidates,
            mentions,
            query_mentions,
            query_entities,
            settings,
            stage_fallbacks: fallbacks,
        };
        let (composition, select_ms, generate_ms) = self.compose_timed(&state, &state.settings)?;
        timings.select_ms = select_ms;
        timings.generate_ms = generate_ms;

        conversation.advance_turn(
            raw_query,
            TurnOutputs {
                prompt: state.prompt.clone(),
                rewritten_query: state.rewritten_query.clone(),
                first_stage: state.first_stage.clone(),
                reranked: state.reranked.clone(),
                query_entities: current_entities,
                selected_passages: composition.selected.clone(),
                answer: composition.answer.clone(),
            },
        );
        let record = self.record(&conversation.topic_id, &state, &composition);
        Ok(TurnResult { state, composition, record, timings })
    }

    /// Redoes selection and generation for a cached turn with new knobs.
    pub fn rescore(&self, state: &TurnState, overrides: &TurnOverrides) -> Result<Composition, PipelineError> {
        let settings = state.settings.apply(overrides)?;
        Ok(self.compose_timed(state, &settings)?.0)
    }

    pub fn record(&self, topic: &str, state: &TurnState, composition: &Composition) -> RunRecord {
        RunRecord {
            topic: topic.to_string(),
            turn: state.turn,
            raw_query: state.raw_query.clone(),
            prompt: state.prompt.clone(),
            rewritten_query: state.rewritten_query.clone(),
            ranked: state.reranked.ids().into_iter().map(String::from).collect(),
            selected: composition.selected.clone(),
            method: composition.method,
            answer: composition.answer.clone(),
            answer_words: composition.answer_words,
            fallbacks: composition.fallbacks.clone(),
        }
    }

    fn compose_timed(&self, state: &TurnState, settings: &Settings) -> Result<(Composition, f64, f64), PipelineError> {
        let mut fallbacks = state.stage_fallbacks.clone();
        let t = Instant::now();
        let (selected_idx, scores, graph_doc, salient) = if state.candidates.is_empty() {
            (Vec::new(), Vec::new(), GraphDocument::default(), Vec::new())
        } else {
            let selection = select_passages(
                &state.candidates,
                settings.method,
                &state.query_entities,
                &self.kb,
                &settings.graph,
                settings.generation.n_passages,
            )?;
            let pool = &state.candidates[..state.candidates.len().min(settings.graph.candidate_pool)];
            let graph_and_ranks = match (selection.graph, selection.ranks) {
                (Some(g), Some(r)) => Some((g, r)),
                _ => conversation_graph(&state.query_entities, pool, &settings.graph)?,
            };
            let (doc, salient) = match &graph_and_ranks {
                Some((g, r)) => (
                    export_graph(g, r, self.export_top_fraction),
                    r.ranked().into_iter().map(|(e, s)| (e.to_string(), s)).collect(),
                ),
                None => (GraphDocument::default(), Vec::new()),
            };
            (selection.order, selection.scores, doc, salient)
        };
        let select_ms = ms(t.elapsed());

        let t = Instant::now();
        let texts: Vec<&str> = selected_idx.iter().map(|&i| state.candidates[i].text.as_str()).collect();
        let (summarizer_input, answer) = if texts.is_empty() {
            (String::new(), String::new())
        } else {
            let input = build_summarizer_input(&texts, settings.generation.include_query, &state.rewritten_query);
            let answer = match generate_answer(&input, &settings.generation, self.summarizer.as_ref()) {
                Ok(a) => a,
                Err(AnswerError::Adapter(e)) if self.fallback.summarizer => {
                    log::warn!("turn {}: summarizer failed, using the stub: {e}", state.turn);
                    fallbacks.push("summarizer".into());
                    generate_answer(&input, &settings.generation, &StubSummarizer)?
                }
                Err(e) => return Err(e.into()),
            };
            (input, answer)
        };
        let generate_ms = ms(t.elapsed());

        let selected: Vec<String> = selected_idx.iter().map(|&i| state.candidates[i].id.clone()).collect();
        let passages = state
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| CandidateView {
                id: c.id.clone(),
                text: c.text.clone(),
                rerank_score: c.rerank_score,
                score: scores.get(i).copied().flatten(),
                selected: selected_idx.contains(&i),
                entities: state.mentions[i].clone(),
            })
            .collect();
        Ok((
            Composition {
                method: settings.method,
                gamma: settings.graph.gamma,
                selected,
                passages,
                graph: graph_doc,
                salient_entities: salient,
                answer_words: answer.split_whitespace().count(),
                summarizer_input,
                answer,
                fallbacks,
            },
            select_ms,
            generate_ms,
        ))
    }

    /// Runs every topic as an independent conversation; records come back in
    /// topic order then turn order.
    pub fn run_topics(&self, topics: &[Topic]) -> Result<Vec<RunRecord>, PipelineError> {
        let per_topic = self.exec.try_map(topics, |topic| {
            let mut conversation = Conversation::new(topic.topic.clone());
            topic
                .turns
                .iter()
                .map(|q| self.run_turn(&mut conversation, q, &TurnOverrides::default()).map(|r| r.record))
                .collect::<Result<Vec<_>, _>>()
        })?;
        Ok(per_topic.into_iter().flatten().collect())
    }
}

/// Writes `records` as a run file to any writer.
pub fn write_run_to<W: Write>(mut out: W, records: &[RunRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(())
}
