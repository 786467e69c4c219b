//! Generation metrics (ROUGE, BLEU, METEOR-lite), retrieval metrics
//! (nDCG, AP, RR) and the run evaluator.
//!
//! All text metrics tokenize with [`crate::text::tokenize`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::index::PassageRecord;
use crate::pipeline::RunRecord;
use crate::text::{tokenize, InflectionalStemmer, Stemmer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("run is empty")]
    EmptyRun,
    #[error("run and qrels disagree on topics; only in run: {only_run:?}; only in qrels: {only_qrels:?}")]
    TopicMismatch { only_run: Vec<String>, only_qrels: Vec<String> },
    #[error("duplicate run entry for topic {topic} turn {turn}")]
    DuplicateTurn { topic: String, turn: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        if cand == 0 || reference == 0 || overlap == 0 {
            return Self::default();
        }
        let p = overlap as f64 / cand as f64;
        let r = overlap as f64 / reference as f64;
        Self { p, r, f1: 2.0 * p * r / (p + r) }
    }
}

/// Clipped n-gram overlap counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NgramOverlap {
    pub overlap: usize,
    pub candidate_total: usize,
    pub reference_total: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> NgramOverlap {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    NgramOverlap {
        overlap: c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum(),
        candidate_total: candidate.len().saturating_sub(n - 1).min(candidate.len()),
        reference_total: reference.len().saturating_sub(n - 1).min(reference.len()),
    }
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let o = ngram_overlap(&tokenize(candidate), &tokenize(reference), n);
    Prf::from_counts(o.overlap, o.candidate_total, o.reference_total)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    Prf::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Sentence BLEU against one or more references.
///
/// Clipped n-gram precisions for orders `1..=max_n`, geometric mean, brevity
/// penalty against the closest reference length (shorter wins ties). An
/// order with no clipped matches uses `(0 + 1) / (total + 1)`. Empty
/// candidate or references give 0.
pub fn bleu_multi(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).filter(|r| !r.is_empty()).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let counts = ngram_counts(&cand, n);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &k)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                k.min(max_ref)
            })
            .sum();
        let total = cand.len().saturating_sub(n - 1);
        let p = if clipped == 0 { 1.0 / (total as f64 + 1.0) } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
    }
    let c = cand.len();
    let r = refs.iter().map(Vec::len).min_by_key(|&len| (len.abs_diff(c), len)).expect("non-empty");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / max_n as f64).exp()
}

pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    bleu_multi(candidate, &[reference], max_n)
}

/// Unigram alignment used by [`meteor_lite`]: (candidate position, reference position).
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let stemmer = InflectionalStemmer;
    let cand_stems: Vec<String> = cand.iter().map(|t| stemmer.stem(t)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| stemmer.stem(t)).collect();
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; cand.len()];

    // exact pass, then stem pass over what is left
    for stage in 0..2 {
        let (cs, rs) = if stage == 0 { (cand, reference) } else { (&cand_stems[..], &ref_stems[..]) };
        let mut expected = 0usize;
        for i in 0..cand.len() {
            if let Some(j) = cand_match[i] {
                expected = j + 1;
                continue;
            }
            // nearest free reference position to where a contiguous chunk would continue
            let best = (0..reference.len())
                .filter(|&j| !ref_used[j] && rs[j] == cs[i])
                .min_by_key(|&j| (j.abs_diff(expected), j));
            if let Some(j) = best {
                ref_used[j] = true;
                cand_match[i] = Some(j);
                expected = j + 1;
            }
        }
    }
    cand_match.into_iter().enumerate().filter_map(|(i, m)| m.map(|j| (i, j))).collect()
}

/// Number of runs of alignments adjacent in both sequences.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in alignment {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

/// METEOR without synonym matching: exact then stem unigram alignment,
/// `F = 10PR / (R + 9P)`, fragmentation penalty `0.5 (chunks / matches)^3`.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    let alignment = meteor_alignment(&cand, &reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = count_chunks(&alignment) as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

fn dcg(grades: impl Iterator<Item = u8>) -> f64 {
    grades.enumerate().map(|(i, g)| (2f64.powi(i32::from(g)) - 1.0) / ((i + 2) as f64).log2()).sum()
}

/// nDCG@k with gain `2^grade - 1`. `judged` holds every grade known for the
/// query and defines the ideal ordering.
pub fn ndcg_at_k(ranked_grades: &[u8], judged: &[u8], k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    let mut ideal = judged.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(ranked_grades.iter().copied().take(k)) / idcg
}

/// Average precision with `relevant_total` relevant items known.
pub fn average_precision(ranked_relevant: &[bool], relevant_total: usize) -> f64 {
    if relevant_total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant_total as f64
}

pub fn reciprocal_rank(ranked_relevant: &[bool]) -> f64 {
    ranked_relevant.iter().position(|&r| r).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

// --- qrels and references ---

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnKey {
    pub topic: String,
    pub turn: usize,
}

/// Graded judgments keyed by turn, then passage id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QRels(pub BTreeMap<TurnKey, BTreeMap<String, u8>>);

impl QRels {
    pub fn topics(&self) -> BTreeSet<&str> {
        self.0.keys().map(|k| k.topic.as_str()).collect()
    }

    pub fn grades(&self, key: &TurnKey) -> Option<&BTreeMap<String, u8>> {
        self.0.get(key)
    }
}

/// Splits a `topic_turn` query id at its last underscore.
pub fn parse_turn_key(qid: &str) -> Option<TurnKey> {
    let (topic, turn) = qid.rsplit_once('_')?;
    Some(TurnKey { topic: topic.to_string(), turn: turn.parse().ok()? })
}

/// Parses TREC qrels lines `topic_turn Q0 passage_id grade`.
pub fn parse_qrels(text: &str, origin: &str) -> Result<QRels, EvalError> {
    let mut qrels = QRels::default();
    for (n, line) in text.lines().enumerate() {
        let err = |message: String| EvalError::Parse { path: origin.to_string(), line: n + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let key = parse_turn_key(fields[0]).ok_or_else(|| err(format!("bad query id `{}`", fields[0])))?;
        let grade: u8 = fields[3]
            .parse()
            .ok()
            .filter(|g| *g <= 4)
            .ok_or_else(|| err(format!("grade `{}` not in 0..=4", fields[3])))?;
        if qrels.0.entry(key).or_default().insert(fields[2].to_string(), grade).is_some() {
            return Err(err(format!("duplicate judgment for `{}`", fields[2])));
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: &Path) -> Result<QRels, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    parse_qrels(&text, &path.display().to_string())
}

/// Reference passages per turn: every passage judged 3 or 4, in id order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet(pub BTreeMap<TurnKey, Vec<String>>);

#[derive(Serialize, Deserialize)]
struct ReferenceLine {
    topic: String,
    turn: usize,
    passages: Vec<String>,
}

pub const REFERENCE_MIN_GRADE: u8 = 3;

impl ReferenceSet {
    pub fn build(qrels: &QRels, passages: &[PassageRecord]) -> Self {
        let text: HashMap<&str, &str> = passages.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
        let mut out = BTreeMap::new();
        for (key, grades) in &qrels.0 {
            let refs: Vec<String> = grades
                .iter()
                .filter(|(_, &g)| g >= REFERENCE_MIN_GRADE)
                .filter_map(|(id, _)| text.get(id.as_str()).map(|t| t.to_string()))
                .collect();
            if !refs.is_empty() {
                out.insert(key.clone(), refs);
            }
        }
        Self(out)
    }

    /// Concatenated reference for `key`, if any.
    pub fn concatenated(&self, key: &TurnKey) -> Option<String> {
        self.0.get(key).map(|v| v.join(" "))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        for (k, v) in &self.0 {
            let line =
                serde_json::to_string(&ReferenceLine { topic: k.topic.clone(), turn: k.turn, passages: v.clone() })
                    .expect("reference line serializes");
            writeln!(f, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, EvalError> {
        let text =
            fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ReferenceLine = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            out.insert(TurnKey { topic: r.topic, turn: r.turn }, r.passages);
        }
        Ok(Self(out))
    }
}

// --- run evaluation ---

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ndcg_depth: usize,
    /// Minimum grade counted as relevant for AP and RR.
    pub relevance_cutoff: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ndcg_depth: 3, relevance_cutoff: 1 }
    }
}

/// Metric values for one turn, or a mean over turns.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub words: f64,
    pub rouge1_p: f64,
    pub rouge1_r: f64,
    pub rouge1_f1: f64,
    pub rouge2_p: f64,
    pub rouge2_r: f64,
    pub rouge2_f1: f64,
    pub rougel_p: f64,
    pub rougel_r: f64,
    pub rougel_f1: f64,
    /// BLEU against the concatenated reference.
    pub bleu1: f64,
    pub bleu4: f64,
    /// BLEU with each relevant passage as a separate reference.
    pub bleu1_multi: f64,
    pub bleu4_multi: f64,
    pub meteor: f64,
    pub ndcg3: f64,
    pub ap: f64,
    pub rr: f64,
}

impl MetricValues {
    pub const COLUMNS: [&'static str; 18] = [
        "words",
        "rouge1_p",
        "rouge1_r",
        "rouge1_f1",
        "rouge2_p",
        "rouge2_r",
        "rouge2_f1",
        "rougel_p",
        "rougel_r",
        "rougel_f1",
        "bleu1",
        "bleu4",
        "bleu1_multi",
        "bleu4_multi",
        "meteor",
        "ndcg3",
        "ap",
        "rr",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn fields(&self) -> [f64; 18] {
        [
            self.words,
            self.rouge1_p,
            self.rouge1_r,
            self.rouge1_f1,
            self.rouge2_p,
            self.rouge2_r,
            self.rouge2_f1,
            self.rougel_p,
            self.rougel_r,
            self.rougel_f1,
            self.bleu1,
            self.bleu4,
            self.bleu1_multi,
            self.bleu4_multi,
            self.meteor,
            self.ndcg3,
            self.ap,
            self.rr,
        ]
    }

    fn from_fields(f: [f64; 18]) -> Self {
        Self {
            words: f[0],
            rouge1_p: f[1],
            rouge1_r: f[2],
            rouge1_f1: f[3],
            rouge2_p: f[4],
            rouge2_r: f[5],
            rouge2_f1: f[6],
            rougel_p: f[7],
            rougel_r: f[8],
            rougel_f1: f[9],
            bleu1: f[10],
            bleu4: f[11],
            bleu1_multi: f[12],
            bleu4_multi: f[13],
            meteor: f[14],
            ndcg3: f[15],
            ap: f[16],
            rr: f[17],
        }
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a MetricValues>) -> MetricValues {
        let mut sum = [0.0; 18];
        let mut n = 0usize;
        for m in items {
            for (s, v) in sum.iter_mut().zip(m.fields()) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            for s in &mut sum {
                *s /= n as f64;
            }
        }
        Self::from_fields(sum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub topic: String,
    pub turn: usize,
    pub has_reference: bool,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub turns: Vec<TurnMetrics>,
    pub topics: BTreeMap<String, MetricValues>,
    /// Mean over all turns.
    pub micro: MetricValues,
    /// Mean of per-topic means.
    pub macro_avg: MetricValues,
}

pub fn evaluate_turn(record: &RunRecord, qrels: &QRels, references: &ReferenceSet, config: &EvalConfig) -> TurnMetrics {
    let key = TurnKey { topic: record.topic.clone(), turn: record.turn };
    let empty = BTreeMap::new();
    let grades = qrels.grades(&key).unwrap_or(&empty);
    let ranked_grades: Vec<u8> = record.ranked.iter().map(|id| grades.get(id).copied().unwrap_or(0)).collect();
    let judged: Vec<u8> = grades.values().copied().collect();
    let relevant: Vec<bool> = ranked_grades.iter().map(|&g| g >= config.relevance_cutoff).collect();
    let relevant_total = judged.iter().filter(|&&g| g >= config.relevance_cutoff).count();

    let mut v = MetricValues {
        words: record.answer_words as f64,
        ndcg3: ndcg_at_k(&ranked_grades, &judged, config.ndcg_depth),
        ap: average_precision(&relevant, relevant_total),
        rr: reciprocal_rank(&relevant),
        ..Default::default()
    };
    let parts = references.0.get(&key);
    if let Some(parts) = parts {
        let reference = parts.join(" ");
        let answer = record.answer.as_str();
        let r1 = rouge_n(answer, &reference, 1);
        let r2 = rouge_n(answer, &reference, 2);
        let rl = rouge_l(answer, &reference);
        let split: Vec<&str> = parts.iter().map(String::as_str).collect();
        v.rouge1_p = r1.p;
        v.rouge1_r = r1.r;
        v.rouge1_f1 = r1.f1;
        v.rouge2_p = r2.p;
        v.rouge2_r = r2.r;
        v.rouge2_f1 = r2.f1;
        v.rougel_p = rl.p;
        v.rougel_r = rl.r;
        v.rougel_f1 = rl.f1;
        v.bleu1 = bleu(answer, &reference, 1);
        v.bleu4 = bleu(answer, &reference, 4);
        v.bleu1_multi = bleu_multi(answer, &split, 1);
        v.bleu4_multi = bleu_multi(answer, &split, 4);
        v.meteor = meteor_lite(answer, &reference);
    }
    TurnMetrics { topic: key.topic, turn: key.turn, has_reference: parts.is_some(), values: v }
}

/// Scores every run record; output rows are sorted by (topic, turn) whatever
/// the input order.
pub fn evaluate_run(
    run: &[RunRecord],
    qrels: &QRels,
    references: &ReferenceSet,
    config: &EvalConfig,
    exec: Execution,
) -> Result<MetricReport, EvalError> {
    if run.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let run_topics: BTreeSet<&str> = run.iter().map(|r| r.topic.as_str()).collect();
    let qrel_topics = qrels.topics();
    if run_topics != qrel_topics {
        return Err(EvalError::TopicMismatch {
            only_run: run_topics.difference(&qrel_topics).map(|s| s.to_string()).collect(),
            only_qrels: qrel_topics.difference(&run_topics).map(|s| s.to_string()).collect(),
        });
    }
    let mut sorted: Vec<&RunRecord> = run.iter().collect();
    sorted.sort_by(|a, b| (&a.topic, a.turn).cmp(&(&b.topic, b.turn)));
    if let Some(w) = sorted.windows(2).find(|w| w[0].topic == w[1].topic && w[0].turn == w[1].turn) {
        return Err(EvalError::DuplicateTurn { topic: w[0].topic.clone(), turn: w[0].turn });
    }
    let turns = exec.map(&sorted, |r| evaluate_turn(r, qrels, references, config));
    let mut by_topic: BTreeMap<String, Vec<&MetricValues>> = BTreeMap::new();
    for t in &turns {
        by_topic.entry(t.topic.clone()).or_default().push(&t.values);
    }
    let topics: BTreeMap<String, MetricValues> =
        by_topic.into_iter().map(|(k, v)| (k, MetricValues::mean(v))).collect();
    Ok(MetricReport {
        micro: MetricValues::mean(turns.iter().map(|t| &t.values)),
        macro_avg: MetricValues::mean(topics.values()),
        turns,
        topics,
    })
}

impl MetricReport {
    /// One row per (topic, turn).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["topic", "turn", "has_reference"];
        header.extend(MetricValues::COLUMNS);
        w.write_record(&header)?;
        for t in &self.turns {
            let mut row = vec![t.topic.clone(), t.turn.to_string(), t.has_reference.to_string()];
            row.extend(t.values.fields().iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| EvalError::Io { path: "<csv>".into(), source })?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "turns": self.turns.len(),
            "topics": self.topics,
            "micro": self.micro,
            "macro": self.macro_avg,
        })
    }
}
