//! Conversation state, the rewriter prompt, and re-ranking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::AdapterError;
use crate::text::{analyze, InflectionalStemmer};

pub const CTX_TOKEN: &str = "[CTX]";
pub const TURN_TOKEN: &str = "[TURN]";
/// Whitespace-token budget for the rewriter prompt.
pub const PROMPT_TOKEN_BUDGET: usize = 512;

/// Passage ids with scores, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList(Vec<(String, f64)>);

impl RankedList {
    /// Wraps entries that are already sorted by non-increasing score.
    pub fn from_sorted(entries: Vec<(String, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].1 >= w[1].1));
        Self(entries)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self(self.0.iter().take(n).cloned().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub raw_query: String,
    pub prompt: String,
    pub rewritten_query: String,
    pub first_stage: RankedList,
    pub reranked: RankedList,
    pub query_entities: BTreeSet<String>,
    pub selected_passages: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub topic_id: String,
    pub turns: Vec<Turn>,
    pub query_entity_history: BTreeSet<String>,
}

/// Everything the pipeline computed for one turn.
#[derive(Debug, Clone, Default)]
pub struct TurnOutputs {
    pub prompt: String,
    pub rewritten_query: String,
    pub first_stage: RankedList,
    pub reranked: RankedList,
    pub query_entities: BTreeSet<String>,
    pub selected_passages: Vec<String>,
    pub answer: String,
}

impl Conversation {
    pub fn new(topic_id: impl Into<String>) -> Self {
        Self { topic_id: topic_id.into(), ..Default::default() }
    }

    pub fn next_index(&self) -> usize {
        self.turns.len() + 1
    }

    /// Appends a completed turn and folds its query entities into the history.
    pub fn advance_turn(&mut self, raw_query: impl Into<String>, outputs: TurnOutputs) -> &Turn {
        self.query_entity_history.extend(outputs.query_entities.iter().cloned());
        let turn = Turn {
            index: self.next_index(),
            raw_query: raw_query.into(),
            prompt: outputs.prompt,
            rewritten_query: outputs.rewritten_query,
            first_stage: outputs.first_stage,
            reranked: outputs.reranked,
            query_entities: outputs.query_entities,
            selected_passages: outputs.selected_passages,
            answer: outputs.answer,
        };
        self.turns.push(turn);
        self.turns.last().expect("just pushed")
    }
}

/// Rewriter input: `q_i [CTX] q_1 p_1 [TURN] q_2 p_2 ... [TURN] q_{i-1} p_{i-1}`.
pub fn build_rewrite_prompt(history: &[(String, String)], current_query: &str) -> String {
    let context: Vec<String> = history.iter().map(|(q, p)| format!("{q} {p}")).collect();
    if context.is_empty() {
        format!("{current_query} {CTX_TOKEN}")
    } else {
        format!("{current_query} {CTX_TOKEN} {}", context.join(&format!(" {TURN_TOKEN} ")))
    }
}

/// Like [`build_rewrite_prompt`], dropping the oldest turns until the prompt
/// fits in `budget` whitespace tokens. The current query is never cut.
pub fn build_rewrite_prompt_capped(history: &[(String, String)], current_query: &str, budget: usize) -> String {
    let words = |s: &str| s.split_whitespace().count();
    let mut used = words(current_query) + 1;
    let mut keep_from = history.len();
    for (i, (q, p)) in history.iter().enumerate().rev() {
        // separator [TURN] between kept turns
        let cost = words(q) + words(p) + usize::from(keep_from != history.len());
        if used + cost > budget {
            break;
        }
        used += cost;
        keep_from = i;
    }
    build_rewrite_prompt(&history[keep_from..], current_query)
}

/// The current query, i.e. everything before the first `[CTX]` marker.
pub fn current_query_of(prompt: &str) -> &str {
    match prompt.split_once(CTX_TOKEN) {
        Some((head, _)) => head.trim_end(),
        None => prompt.trim(),
    }
}

/// Cross-encoder input layout: `[CLS] query [SEP] passage`.
pub fn build_rerank_input(query: &str, passage_text: &str) -> String {
    format!("[CLS] {query} [SEP] {passage_text}")
}

pub trait RewriterAdapter: Send + Sync {
    fn rewrite(&self, prompt: &str) -> Result<String, AdapterError>;
}

/// One query/passage pair sent to a re-ranker.
#[derive(Debug, Clone, Copy)]
pub struct RerankPair<'a> {
    pub query: &'a str,
    pub passage: &'a str,
    pub first_stage_score: f64,
}

impl RerankPair<'_> {
    pub fn model_input(&self) -> String {
        build_rerank_input(self.query, self.passage)
    }
}

/// Returns one relevance score per pair, in pair order.
pub trait RerankerAdapter: Send + Sync {
    fn score(&self, pairs: &[RerankPair<'_>]) -> Result<Vec<f64>, AdapterError>;
}

/// Returns the current query unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityRewriter;

impl RewriterAdapter for IdentityRewriter {
    fn rewrite(&self, prompt: &str) -> Result<String, AdapterError> {
        Ok(current_query_of(prompt).to_string())
    }
}

/// Fraction of distinct stemmed query tokens that also occur in the passage.
#[derive(Debug, Default, Clone, Copy)]
pub struct OverlapReranker;

impl RerankerAdapter for OverlapReranker {
    fn score(&self, pairs: &[RerankPair<'_>]) -> Result<Vec<f64>, AdapterError> {
        Ok(pairs
            .iter()
            .map(|pair| {
                let q: BTreeSet<String> = analyze(pair.query, &InflectionalStemmer).into_iter().collect();
                if q.is_empty() {
                    return 0.0;
                }
                let p: BTreeSet<String> = analyze(pair.passage, &InflectionalStemmer).into_iter().collect();
                q.intersection(&p).count() as f64 / q.len() as f64
            })
            .collect())
    }
}

/// Scores each pair with its first-stage score.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassthroughReranker;

impl RerankerAdapter for PassthroughReranker {
    fn score(&self, pairs: &[RerankPair<'_>]) -> Result<Vec<f64>, AdapterError> {
        Ok(pairs.iter().map(|p| p.first_stage_score).collect())
    }
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("turn {turn}: re-ranker failed: {source}")]
    Adapter {
        turn: usize,
        #[source]
        source: AdapterError,
    },
    #[error("turn {turn}: passage `{id}` not found in corpus")]
    MissingPassage { turn: usize, id: String },
    #[error("turn {turn}: depth {depth} exceeds {available} candidates")]
    Depth { turn: usize, depth: usize, available: usize },
}

/// Re-orders the top `depth` candidates by adapter score and drops the rest.
///
/// Equal scores keep their first-stage order.
pub fn rerank<'c>(
    turn: usize,
    query: &str,
    candidates: &RankedList,
    lookup: impl Fn(&str) -> Option<&'c str>,
    adapter: &dyn RerankerAdapter,
    depth: usize,
) -> Result<RankedList, RerankError> {
    if depth > candidates.len() {
        return Err(RerankError::Depth { turn, depth, available: candidates.len() });
    }
    let top = &candidates.entries()[..depth];
    let pairs = top
        .iter()
        .map(|(id, score)| {
            lookup(id)
                .map(|passage| RerankPair { query, passage, first_stage_score: *score })
                .ok_or_else(|| RerankError::MissingPassage { turn, id: id.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores = adapter.score(&pairs).map_err(|source| RerankError::Adapter { turn, source })?;
    if scores.len() != pairs.len() {
        return Err(RerankError::Adapter {
            turn,
            source: AdapterError::Invalid(format!("expected {} scores, got {}", pairs.len(), scores.len())),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(RerankError::Adapter { turn, source: AdapterError::Invalid(format!("non-finite score {bad}")) });
    }
    let mut order: Vec<usize> = (0..depth).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RankedList::from_sorted(order.into_iter().map(|i| (top[i].0.clone(), scores[i])).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(items: &[(&str, f64)]) -> RankedList {
        RankedList::from_sorted(items.iter().map(|(i, s)| (i.to_string(), *s)).collect())
    }

    #[test]
    fn prompt_format() {
        let h = vec![("What is throat cancer?".to_string(), "Throat cancer is …".to_string())];
        assert_eq!(
            build_rewrite_prompt(&h, "Is it treatable?"),
            "Is it treatable? [CTX] What is throat cancer? Throat cancer is …"
        );
        assert_eq!(build_rewrite_prompt(&[], "q1"), "q1 [CTX]");
        let h2 = vec![("q1".into(), "p1".into()), ("q2".into(), "p2".into())];
        let p = build_rewrite_prompt(&h2, "q3");
        assert_eq!(p, "q3 [CTX] q1 p1 [TURN] q2 p2");
        assert_eq!(p.matches(TURN_TOKEN).count(), 1);
    }

    #[test]
    fn prompt_cap_drops_oldest_turns() {
        let h: Vec<(String, String)> = (1..=4).map(|i| (format!("q{i}"), format!("w{i} w{i} w{i}"))).collect();
        // current (1) + [CTX] (1) + turn4 (4) + [TURN] + turn3 (4) = 11
        assert_eq!(build_rewrite_prompt_capped(&h, "now", 11), "now [CTX] q3 w3 w3 w3 [TURN] q4 w4 w4 w4");
        assert_eq!(build_rewrite_prompt_capped(&h, "now", 3), "now [CTX]");
        assert_eq!(build_rewrite_prompt_capped(&h, "now", 512), build_rewrite_prompt(&h, "now"));
    }

    #[test]
    fn identity_rewriter_extracts_current_query() {
        let r = IdentityRewriter;
        assert_eq!(r.rewrite("Is it treatable? [CTX] a b").unwrap(), "Is it treatable?");
        assert_eq!(r.rewrite("q1 [CTX]").unwrap(), "q1");
    }

    #[test]
    fn rerank_input_layout() {
        assert_eq!(build_rerank_input("what is x", "x is y"), "[CLS] what is x [SEP] x is y");
        assert_eq!(build_rerank_input("q", ""), "[CLS] q [SEP] ");
        assert_eq!(build_rerank_input("a [SEP] b", "c"), "[CLS] a [SEP] b [SEP] c");
    }

    #[test]
    fn overlap_rerank_reorders() {
        let texts = [("pB", "banana"), ("pA", "the first artificial satellite")];
        let lookup = |id: &str| texts.iter().find(|(i, _)| *i == id).map(|(_, t)| *t);
        let cands = list(&[("pB", -1.0), ("pA", -2.0)]);
        let r = rerank(1, "artificial satellite", &cands, lookup, &OverlapReranker, 2).unwrap();
        assert_eq!(r.ids(), vec!["pA", "pB"]);
        assert_eq!(r.entries()[0].1, 1.0);

        let r = rerank(1, "zzz", &cands, lookup, &OverlapReranker, 2).unwrap();
        assert_eq!(r.ids(), vec!["pB", "pA"]);

        let r = rerank(1, "artificial satellite", &cands, lookup, &OverlapReranker, 1).unwrap();
        assert_eq!(r.ids(), vec!["pB"]);
    }

    struct Failing;
    impl RerankerAdapter for Failing {
        fn score(&self, _: &[RerankPair<'_>]) -> Result<Vec<f64>, AdapterError> {
            Err(AdapterError::Invalid("down".into()))
        }
    }

    #[test]
    fn rerank_errors_carry_turn() {
        let cands = list(&[("a", 0.0)]);
        let err = rerank(7, "q", &cands, |_| Some("t"), &Failing, 1).unwrap_err();
        assert!(matches!(err, RerankError::Adapter { turn: 7, .. }));
        let err = rerank(2, "q", &cands, |_| None, &OverlapReranker, 1).unwrap_err();
        assert!(matches!(err, RerankError::MissingPassage { turn: 2, .. }));
        assert!(matches!(rerank(3, "q", &cands, |_| Some("t"), &OverlapReranker, 2), Err(RerankError::Depth { .. })));
    }

    #[test]
    fn advance_turn_merges_entities() {
        let mut c = Conversation::new("t1");
        let outs = |es: &[&str]| TurnOutputs {
            query_entities: es.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        c.advance_turn("first", outs(&["e1"]));
        assert_eq!(c.turns[0].index, 1);
        c.advance_turn("second", outs(&["e2", "e1"]));
        assert_eq!(c.turns.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(c.query_entity_history.iter().collect::<Vec<_>>(), vec!["e1", "e2"]);
    }

    proptest! {
        #[test]
        fn prompt_marker_counts(n in 1usize..8) {
            let h: Vec<(String, String)> = (1..n).map(|i| (format!("q{i}"), format!("p{i}"))).collect();
            let p = build_rewrite_prompt(&h, "cur");
            prop_assert_eq!(p.matches(CTX_TOKEN).count(), 1);
            prop_assert_eq!(p.matches(TURN_TOKEN).count(), n.saturating_sub(2));
        }

        #[test]
        fn rerank_is_permutation_of_prefix(
            scores in proptest::collection::vec(-10.0f64..0.0, 1..20),
            depth_frac in 0.0f64..1.0,
        ) {
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let cands = RankedList::from_sorted(
                sorted.iter().enumerate().map(|(i, s)| (format!("d{i:02}"), *s)).collect(),
            );
            let depth = 1 + ((cands.len() - 1) as f64 * depth_frac) as usize;
            let lookup = |id: &str| Some(if id.ends_with('0') { "alpha beta" } else { "beta" });
            let r = rerank(1, "alpha", &cands, lookup, &OverlapReranker, depth).unwrap();
            let mut got: Vec<&str> = r.ids();
            got.sort();
            let mut want: Vec<&str> = cands.ids()[..depth].to_vec();
            want.sort();
            prop_assert_eq!(got, want);

            let same = rerank(1, "alpha", &cands, lookup, &PassthroughReranker, depth).unwrap();
            prop_assert_eq!(same, cands.truncated(depth));
        }
    }
}
