//! Per-conversation entity graph, EntityRank salience and the two
//! entity-based passage scores.
//!
//! The entity map has one row per entity and one column for the (history
//! inclusive) query plus one per candidate passage. Cells are presence
//! indicators weighted by `gamma` for the query column and `1 - gamma` for
//! passage columns. The graph is the Gram matrix of the map; EntityRank is a
//! weighted PageRank over it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linking::KnowledgeBaseStore;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("gamma {0} outside [0, 1]")]
    Gamma(f64),
    #[error("invalid graph parameters: {0}")]
    Params(String),
    #[error("entity graph is empty")]
    Empty,
    #[error("graph weights must be symmetric, finite and non-negative ({0})")]
    Weights(String),
    #[error("EntityRank did not converge after {iterations} iterations (L1 residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// Which way round the link-overlap measure is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelatednessPolarity {
    /// `1 - distance`; 1 for identical inlink sets.
    #[default]
    Similarity,
    /// The clamped distance itself; 0 for identical inlink sets.
    Raw,
}

/// How a passage's entity salience is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SalienceAggregation {
    /// Mean rank over the passage's graph entities.
    #[default]
    Mean,
    /// Sum of rank divided by each entity's graph degree.
    Degree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub pagerank_tol: f64,
    pub pagerank_max_iter: usize,
    pub candidate_pool: usize,
    pub relatedness_polarity: RelatednessPolarity,
    pub salience_aggregation: SalienceAggregation,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            tau: 0.0,
            alpha: 0.99,
            pagerank_tol: 1e-10,
            pagerank_max_iter: 10_000,
            candidate_pool: 10,
            relatedness_polarity: RelatednessPolarity::Similarity,
            salience_aggregation: SalienceAggregation::Mean,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(GraphError::Gamma(self.gamma));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(GraphError::Params(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(GraphError::Params(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.pagerank_tol.is_nan()
            || self.pagerank_tol <= 0.0
            || self.pagerank_max_iter == 0
            || self.candidate_pool == 0
        {
            return Err(GraphError::Params(
                "pagerank_tol, pagerank_max_iter and candidate_pool must be positive".into(),
            ));
        }
        Ok(())
    }
}

// --- relatedness ---

/// Link-overlap distance between two inlink sets, clamped to `[0, 1]`.
///
/// `d = (ln max(|A|,|B|) - ln |A∩B|) / (ln |D| - ln min(|A|,|B|))`, with
/// `d = 1` when the intersection is empty or `|D| <= min(|A|,|B|)`.
pub fn link_distance(a: &BTreeSet<String>, b: &BTreeSet<String>, total_entities: usize) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let shared = small.iter().filter(|e| large.contains(*e)).count();
    if shared == 0 || total_entities <= small.len() {
        return 1.0;
    }
    let num = (large.len() as f64).ln() - (shared as f64).ln();
    let den = (total_entities as f64).ln() - (small.len() as f64).ln();
    (num / den).clamp(0.0, 1.0)
}

pub fn entity_relatedness(e1: &str, e2: &str, kb: &KnowledgeBaseStore, polarity: RelatednessPolarity) -> f64 {
    let d = link_distance(kb.inlinks(e1), kb.inlinks(e2), kb.total_entities());
    match polarity {
        RelatednessPolarity::Similarity => 1.0 - d,
        RelatednessPolarity::Raw => d,
    }
}

/// Mean pairwise relatedness between query-history entities and passage
/// entities; `None` when either set is empty.
pub fn passage_score_er(
    passage_entities: &BTreeSet<String>,
    query_entities: &BTreeSet<String>,
    kb: &KnowledgeBaseStore,
    polarity: RelatednessPolarity,
) -> Option<f64> {
    if passage_entities.is_empty() || query_entities.is_empty() {
        return None;
    }
    let total: f64 = query_entities
        .iter()
        .flat_map(|q| passage_entities.iter().map(move |p| (q, p)))
        .map(|(q, p)| entity_relatedness(q, p, kb, polarity))
        .sum();
    Some(total / (query_entities.len() * passage_entities.len()) as f64)
}

// --- map and graph ---

#[derive(Debug, Clone, PartialEq)]
pub struct EntityMap {
    entities: Vec<String>,
    gamma: f64,
    columns: usize,
    cells: Vec<f64>,
}

impl EntityMap {
    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Query column plus one column per passage.
    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn cell(&self, row: usize, column: usize) -> f64 {
        self.cells[row * self.columns + column]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.cells[row * self.columns..(row + 1) * self.columns]
    }
}

/// Rows are the sorted union of query and passage entities.
pub fn build_entity_map(
    query_entities: &BTreeSet<String>,
    passage_entities: &[BTreeSet<String>],
    gamma: f64,
) -> Result<EntityMap, GraphError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(GraphError::Gamma(gamma));
    }
    let mut all: BTreeSet<&String> = query_entities.iter().collect();
    for p in passage_entities {
        all.extend(p.iter());
    }
    let entities: Vec<String> = all.into_iter().cloned().collect();
    let columns = passage_entities.len() + 1;
    let mut cells = vec![0.0; entities.len() * columns];
    for (r, e) in entities.iter().enumerate() {
        if query_entities.contains(e) {
            cells[r * columns] = gamma;
        }
        for (k, p) in passage_entities.iter().enumerate() {
            if p.contains(e) {
                cells[r * columns + k + 1] = 1.0 - gamma;
            }
        }
    }
    Ok(EntityMap { entities, gamma, columns, cells })
}

/// Symmetric, non-negative weighted adjacency over entities (dense).
#[derive(Debug, Clone, PartialEq)]
pub struct EntityGraph {
    entities: Vec<String>,
    weights: Vec<f64>,
}

impl EntityGraph {
    /// Wraps a dense row-major matrix after checking symmetry and signs.
    pub fn from_weights(entities: Vec<String>, weights: Vec<f64>) -> Result<Self, GraphError> {
        let n = entities.len();
        if weights.len() != n * n {
            return Err(GraphError::Weights(format!("{} weights for {n} entities", weights.len())));
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights[i * n + j];
                if !(w >= 0.0 && w.is_finite()) || w != weights[j * n + i] {
                    return Err(GraphError::Weights(format!("entry ({i}, {j}) = {w}")));
                }
            }
        }
        Ok(Self { entities, weights })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.len() + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn position(&self, entity: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == entity)
    }

    /// Off-diagonal neighbours of `i` with positive weight.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.len();
        self.weights[i * n..(i + 1) * n].iter().copied().enumerate().filter(move |&(j, w)| j != i && w > 0.0)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }
}

/// `map · mapᵀ`, with off-diagonal entries below `tau` zeroed.
pub fn build_entity_graph(map: &EntityMap, tau: f64) -> EntityGraph {
    let n = map.entities.len();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let ri = map.row(i);
        for j in i..n {
            let rj = map.row(j);
            let mut dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            if i != j && dot < tau {
                dot = 0.0;
            }
            weights[i * n + j] = dot;
            weights[j * n + i] = dot;
        }
    }
    EntityGraph { entities: map.entities.clone(), weights }
}

// --- EntityRank ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRankVector {
    entities: Vec<String>,
    scores: Vec<f64>,
    #[serde(skip)]
    iterations: usize,
}

impl EntityRankVector {
    pub fn get(&self, entity: &str) -> Option<f64> {
        self.entities.iter().position(|e| e == entity).map(|i| self.scores[i])
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn as_map(&self) -> BTreeMap<&str, f64> {
        self.entities.iter().map(String::as_str).zip(self.scores.iter().copied()).collect()
    }

    /// Entities by descending rank, ties by id.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> =
            self.entities.iter().map(String::as_str).zip(self.scores.iter().copied()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entities: self.entities.clone(),
            scores: self.scores.iter().map(|s| s * factor).collect(),
            iterations: self.iterations,
        }
    }
}

/// Weighted PageRank by power iteration.
///
/// `rank_i = (1-α)/N + α Σ_j w(i,j) rank_j / deg(j)` over off-diagonal
/// neighbours, where `deg(j)` is the total off-diagonal weight of `j`. Mass
/// held by entities with no neighbours is spread uniformly. Iteration stops
/// once the L1 change drops below `pagerank_tol`.
pub fn entity_rank(graph: &EntityGraph, params: &GraphParams) -> Result<EntityRankVector, GraphError> {
    let n = graph.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let alpha = params.alpha;
    let adjacency: Vec<Vec<(usize, f64)>> = (0..n).map(|i| graph.neighbors(i).collect()).collect();
    let out_weight: Vec<f64> = adjacency.iter().map(|nb| nb.iter().map(|&(_, w)| w).sum()).collect();
    let dangling: Vec<usize> = (0..n).filter(|&i| out_weight[i] == 0.0).collect();
    let nf = n as f64;

    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut share = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iteration in 1..=params.pagerank_max_iter {
        for j in 0..n {
            share[j] = if out_weight[j] > 0.0 { rank[j] / out_weight[j] } else { 0.0 };
        }
        let dangling_mass: f64 = dangling.iter().map(|&j| rank[j]).sum();
        let base = (1.0 - alpha) / nf + alpha * dangling_mass / nf;
        for i in 0..n {
            let inflow: f64 = adjacency[i].iter().map(|&(j, w)| w * share[j]).sum();
            next[i] = base + alpha * inflow;
        }
        residual = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if residual < params.pagerank_tol {
            return Ok(EntityRankVector { entities: graph.entities.clone(), scores: rank, iterations: iteration });
        }
    }
    Err(GraphError::NonConvergence { iterations: params.pagerank_max_iter, residual })
}

/// Mean salience of the passage entities that appear in the graph; 0 when none do.
pub fn passage_score_eg(passage_entities: &BTreeSet<String>, ranks: &EntityRankVector) -> f64 {
    let found: Vec<f64> = passage_entities.iter().filter_map(|e| ranks.get(e)).collect();
    if found.is_empty() {
        0.0
    } else {
        found.iter().sum::<f64>() / found.len() as f64
    }
}

/// Sum of salience divided by each entity's degree (isolated entities count once).
pub fn passage_score_eg_degree(
    passage_entities: &BTreeSet<String>,
    ranks: &EntityRankVector,
    graph: &EntityGraph,
) -> f64 {
    passage_entities
        .iter()
        .filter_map(|e| {
            let pos = graph.position(e)?;
            Some(ranks.scores[pos] / graph.degree(pos).max(1) as f64)
        })
        .sum()
}

// --- export ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub rank: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
    pub weight: f64,
}

/// Portable node-link document for the explorer and plotting tools.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Nodes by descending rank (ties by id); the first `ceil(top_fraction · N)`
/// (at least one) are tier `top`. Edges are the positive off-diagonal
/// weights with `source < target`, sorted.
pub fn export_graph(graph: &EntityGraph, ranks: &EntityRankVector, top_fraction: f64) -> GraphDocument {
    let ranked = ranks.ranked();
    let top = ((top_fraction.clamp(0.0, 1.0) * ranked.len() as f64).ceil() as usize).max(1);
    let nodes = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (id, rank))| GraphNode {
            id: id.to_string(),
            rank,
            tier: if i < top { Tier::Top } else { Tier::Bottom },
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..graph.len() {
        for (j, w) in graph.neighbors(i) {
            let (a, b) = (&graph.entities[i], &graph.entities[j]);
            if a < b {
                edges.push(GraphEdge { source: a.clone(), target: b.clone(), weight: w });
            }
        }
    }
    edges.sort_by(|x, y| (&x.source, &x.target).cmp(&(&y.source, &y.target)));
    GraphDocument { nodes, edges }
}
