//! Passage selection for the summarizer and answer generation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    build_entity_graph, build_entity_map, entity_rank, passage_score_eg, passage_score_eg_degree, passage_score_er,
    EntityGraph, EntityRankVector, GraphError, GraphParams, SalienceAggregation,
};
use crate::linking::KnowledgeBaseStore;
use crate::remote::AdapterError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScoringMethod {
    /// Re-ranked order.
    #[default]
    O,
    /// Mean entity relatedness to the query history.
    ER,
    /// Mean EntityRank salience over the conversation graph.
    EG,
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMethod::O => "O",
            ScoringMethod::ER => "ER",
            ScoringMethod::EG => "EG",
        })
    }
}

impl FromStr for ScoringMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "O" => Ok(ScoringMethod::O),
            "ER" => Ok(ScoringMethod::ER),
            "EG" => Ok(ScoringMethod::EG),
            other => Err(format!("unknown scoring method `{other}` (expected O, ER or EG)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub min_length: usize,
    /// `None` means the word count of the summarizer input.
    pub max_length: Option<usize>,
    pub beams: usize,
    pub no_repeat_ngram: usize,
    pub early_stopping: bool,
    pub include_query: bool,
    pub n_passages: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            min_length: 50,
            max_length: None,
            beams: 4,
            no_repeat_ngram: 3,
            early_stopping: true,
            include_query: false,
            n_passages: 3,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), AnswerError> {
        if self.min_length == 0 {
            return Err(AnswerError::Config("min_length must be positive".into()));
        }
        if let Some(max) = self.max_length {
            if max < self.min_length {
                return Err(AnswerError::Config(format!("max_length {max} is below min_length {}", self.min_length)));
            }
        }
        if self.n_passages == 0 {
            return Err(AnswerError::Config("n_passages must be at least 1".into()));
        }
        Ok(())
    }

    /// Concrete lengths for an input of `input_words` words. When the input is
    /// shorter than `min_length`, the minimum is lowered to the maximum.
    pub fn resolve(&self, input_words: usize) -> SummaryParams {
        let max_length = self.max_length.unwrap_or(input_words);
        SummaryParams {
            min_length: self.min_length.min(max_length),
            max_length,
            beams: self.beams,
            no_repeat_ngram: self.no_repeat_ngram,
            early_stopping: self.early_stopping,
        }
    }
}

/// Generation parameters as sent to a summarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryParams {
    pub min_length: usize,
    pub max_length: usize,
    pub beams: usize,
    pub no_repeat_ngram: usize,
    pub early_stopping: bool,
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("summarizer input is empty")]
    EmptyInput,
    #[error("no candidate passages to select from")]
    NoCandidates,
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("summarizer failed: {0}")]
    Adapter(#[from] AdapterError),
}

pub trait SummarizerAdapter: Send + Sync {
    fn summarize(&self, input: &str, params: &SummaryParams) -> Result<String, AdapterError>;
}

/// Extractive stand-in: leading whole sentences up to `min_length` words,
/// truncated at `max_length`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubSummarizer;

impl SummarizerAdapter for StubSummarizer {
    fn summarize(&self, input: &str, params: &SummaryParams) -> Result<String, AdapterError> {
        Ok(stub_summarize(input, params))
    }
}

/// Whole sentences in order until at least `min_length` words, then cut at
/// `max_length` words. Sentences end at a word whose last char is `.`, `!` or `?`.
pub fn stub_summarize(input: &str, params: &SummaryParams) -> String {
    let words: Vec<&str> = input.split_whitespace().collect();
    let mut take = words.len();
    for (i, w) in words.iter().enumerate() {
        let ends_sentence = w.ends_with(['.', '!', '?']);
        if ends_sentence && i + 1 >= params.min_length {
            take = i + 1;
            break;
        }
    }
    words[..take.min(params.max_length)].join(" ")
}

/// A re-ranked candidate with its linked entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub rerank_score: f64,
    pub entities: BTreeSet<String>,
}

/// Passage selection outcome. `scores` is aligned with the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub method: ScoringMethod,
    /// Indices into the candidate slice, best first; length `min(n_passages, pool)`.
    pub order: Vec<usize>,
    pub scores: Vec<Option<f64>>,
    pub graph: Option<EntityGraph>,
    pub ranks: Option<EntityRankVector>,
}

impl Selection {
    pub fn ids<'a>(&self, candidates: &'a [Candidate]) -> Vec<&'a str> {
        self.order.iter().map(|&i| candidates[i].id.as_str()).collect()
    }
}

/// The conversation entity graph over the query history and the candidate pool.
pub fn conversation_graph(
    query_entities: &BTreeSet<String>,
    pool: &[Candidate],
    params: &GraphParams,
) -> Result<Option<(EntityGraph, EntityRankVector)>, GraphError> {
    let passages: Vec<BTreeSet<String>> = pool.iter().map(|c| c.entities.clone()).collect();
    let map = build_entity_map(query_entities, &passages, params.gamma)?;
    let graph = build_entity_graph(&map, params.tau);
    if graph.is_empty() {
        return Ok(None);
    }
    let ranks = entity_rank(&graph, params)?;
    Ok(Some((graph, ranks)))
}

/// Picks `n_passages` from the first `params.candidate_pool` candidates.
///
/// `O` keeps the re-ranked order. `ER` and `EG` sort by their passage score,
/// descending; equal scores keep re-ranked order and passages without an ER
/// score (no entities on either side) sort after every scored passage.
pub fn select_passages(
    candidates: &[Candidate],
    method: ScoringMethod,
    query_entities: &BTreeSet<String>,
    kb: &KnowledgeBaseStore,
    params: &GraphParams,
    n_passages: usize,
) -> Result<Selection, AnswerError> {
    if candidates.is_empty() {
        return Err(AnswerError::NoCandidates);
    }
    let pool = &candidates[..candidates.len().min(params.candidate_pool)];
    let (scores, graph, ranks): (Vec<Option<f64>>, _, _) = match method {
        ScoringMethod::O => (pool.iter().map(|c| Some(c.rerank_score)).collect(), None, None),
        ScoringMethod::ER => (
            pool.iter()
                .map(|c| passage_score_er(&c.entities, query_entities, kb, params.relatedness_polarity))
                .collect(),
            None,
            None,
        ),
        ScoringMethod::EG => match conversation_graph(query_entities, pool, params)? {
            Some((graph, ranks)) => {
                let scores = pool
                    .iter()
                    .map(|c| {
                        Some(match params.salience_aggregation {
                            SalienceAggregation::Mean => passage_score_eg(&c.entities, &ranks),
                            SalienceAggregation::Degree => passage_score_eg_degree(&c.entities, &ranks, &graph),
                        })
                    })
                    .collect();
                (scores, Some(graph), Some(ranks))
            }
            None => (vec![Some(0.0); pool.len()], None, None),
        },
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    if method != ScoringMethod::O {
        order.sort_by(|&a, &b| match (scores[a], scores[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
    }
    order.truncate(n_passages);
    Ok(Selection { method, order, scores, graph, ranks })
}

/// Selected passage texts joined by single spaces, optionally prefixed by the query.
pub fn build_summarizer_input(passages: &[&str], include_query: bool, query: &str) -> String {
    let body = passages.join(" ");
    if include_query {
        format!("{query} {body}")
    } else {
        body
    }
}

pub fn generate_answer(
    input: &str,
    config: &GenerationConfig,
    adapter: &dyn SummarizerAdapter,
) -> Result<String, AnswerError> {
    if input.trim().is_empty() {
        return Err(AnswerError::EmptyInput);
    }
    let params = config.resolve(input.split_whitespace().count());
    Ok(adapter.summarize(input, &params)?)
}
