//! Inverted index and Dirichlet-smoothed query-likelihood retrieval.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::RankedList;
use crate::exec::Execution;
use crate::text::{analyze, InflectionalStemmer, Stemmer, TOKENIZER_VERSION};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),
    #[error("passage `{0}` has empty text")]
    EmptyText(String),
    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("{path}:{line}: {message}")]
    Corpus { path: String, line: usize, message: String },
    #[error("index at {path}: {message}")]
    Persist { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

/// One posting: internal document number and term frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Immutable inverted index.
///
/// Document numbers are assigned in ascending passage-id order, so postings
/// sorted by document number are also sorted by passage id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    passages: Vec<PassageRecord>,
    doc_length: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    collection_frequency: BTreeMap<String, u64>,
    total_tokens: u64,
    stemmer: String,
    #[serde(skip)]
    by_id: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub mu: f64,
    pub k: usize,
    pub rerank_depth: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { mu: 2500.0, k: 1000, rerank_depth: 10 }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(IndexError::InvalidParams(format!("mu must be positive, got {}", self.mu)));
        }
        if self.rerank_depth == 0 || self.rerank_depth > self.k {
            return Err(IndexError::InvalidParams(format!(
                "need 0 < rerank_depth <= k, got rerank_depth={} k={}",
                self.rerank_depth, self.k
            )));
        }
        Ok(())
    }
}

/// Written next to the index; records the analysis chain and a content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub tokenizer: String,
    pub stemmer: String,
    pub passage_count: usize,
    pub term_count: usize,
    pub total_tokens: u64,
    pub content_sha256: String,
}

/// Builds an index with the default stemmer.
pub fn build_index<I>(corpus: I) -> Result<InvertedIndex, IndexError>
where
    I: IntoIterator<Item = PassageRecord>,
{
    build_index_with(corpus, &InflectionalStemmer)
}

pub fn build_index_with<I>(corpus: I, stemmer: &dyn Stemmer) -> Result<InvertedIndex, IndexError>
where
    I: IntoIterator<Item = PassageRecord>,
{
    let mut passages: Vec<PassageRecord> = Vec::new();
    let mut seen = HashSet::new();
    for record in corpus {
        if !seen.insert(record.id.clone()) {
            return Err(IndexError::DuplicateId(record.id));
        }
        if record.text.is_empty() {
            return Err(IndexError::EmptyText(record.id));
        }
        passages.push(record);
    }
    passages.sort_by(|a, b| a.id.cmp(&b.id));

    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut collection_frequency: BTreeMap<String, u64> = BTreeMap::new();
    let mut doc_length = Vec::with_capacity(passages.len());
    let mut total_tokens = 0u64;

    for (doc, passage) in passages.iter().enumerate() {
        let tokens = analyze(&passage.text, stemmer);
        doc_length.push(tokens.len() as u32);
        total_tokens += tokens.len() as u64;
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        for (term, tf) in counts {
            *collection_frequency.entry(term.clone()).or_default() += u64::from(tf);
            postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
        }
    }

    let mut index = InvertedIndex {
        passages,
        doc_length,
        postings,
        collection_frequency,
        total_tokens,
        stemmer: stemmer.name().to_string(),
        by_id: BTreeMap::new(),
    };
    index.rebuild_lookup();
    Ok(index)
}

/// Reads newline-delimited JSON passage records.
pub fn read_corpus(path: &Path) -> Result<Vec<PassageRecord>, IndexError> {
    let file = fs::File::open(path).map_err(|source| IndexError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IndexError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PassageRecord = serde_json::from_str(&line).map_err(|e| IndexError::Corpus {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

impl InvertedIndex {
    fn rebuild_lookup(&mut self) {
        self.by_id = self.passages.iter().enumerate().map(|(i, p)| (p.id.clone(), i as u32)).collect();
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn stemmer_name(&self) -> &str {
        &self.stemmer
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn collection_frequency(&self, term: &str) -> u64 {
        self.collection_frequency.get(term).copied().unwrap_or(0)
    }

    pub fn passages(&self) -> &[PassageRecord] {
        &self.passages
    }

    pub fn passage(&self, id: &str) -> Option<&PassageRecord> {
        self.by_id.get(id).map(|&d| &self.passages[d as usize])
    }

    pub fn doc_length(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).map(|&d| self.doc_length[d as usize])
    }

    fn doc_number(&self, id: &str) -> Result<u32, IndexError> {
        self.by_id.get(id).copied().ok_or_else(|| IndexError::UnknownPassage(id.to_string()))
    }

    fn term_frequency(&self, term: &str, doc: u32) -> u32 {
        let list = self.postings(term);
        match list.binary_search_by_key(&doc, |p| p.doc) {
            Ok(i) => list[i].tf,
            Err(_) => 0,
        }
    }

    /// Smoothed log-likelihood of `query_tokens` (already analysed) under the
    /// passage language model with Dirichlet prior `mu`.
    ///
    /// Terms unseen in the whole collection use the floor probability
    /// `1 / (total_tokens + 1)` in place of `cf / total_tokens`.
    pub fn lmd_score(&self, query_tokens: &[String], passage_id: &str, mu: f64) -> Result<f64, IndexError> {
        let doc = self.doc_number(passage_id)?;
        Ok(self.lmd_score_doc(query_tokens, doc, mu))
    }

    fn lmd_score_doc(&self, query_tokens: &[String], doc: u32, mu: f64) -> f64 {
        let dl = f64::from(self.doc_length[doc as usize]);
        let denom = dl + mu;
        query_tokens
            .iter()
            .map(|w| {
                let cf = self.collection_frequency(w);
                let background =
                    if cf == 0 { 1.0 / (self.total_tokens as f64 + 1.0) } else { cf as f64 / self.total_tokens as f64 };
                let tf = f64::from(self.term_frequency(w, doc));
                ((tf + mu * background) / denom).ln()
            })
            .sum()
    }

    /// Top `params.k` passages for `query_text`, best first, ties by passage id.
    pub fn retrieve(&self, query_text: &str, params: &RetrievalParams) -> Result<RankedList, IndexError> {
        self.retrieve_with(query_text, params, Execution::default())
    }

    pub fn retrieve_with(
        &self,
        query_text: &str,
        params: &RetrievalParams,
        exec: Execution,
    ) -> Result<RankedList, IndexError> {
        if self.passages.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let query = analyze(query_text, &InflectionalStemmer);
        if query.is_empty() {
            return Ok(RankedList::default());
        }
        let scores = exec.map_range(self.passages.len(), |d| self.lmd_score_doc(&query, d as u32, params.mu));
        // doc numbers follow id order, so a stable sort on score alone
        // leaves ties in ascending id order
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(params.k);
        Ok(RankedList::from_sorted(order.into_iter().map(|d| (self.passages[d].id.clone(), scores[d])).collect()))
    }

    /// Writes `manifest.json` and `index.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<IndexManifest, IndexError> {
        let io_err = |source| IndexError::Io { path: dir.display().to_string(), source };
        fs::create_dir_all(dir).map_err(io_err)?;
        let body = serde_json::to_vec(self)
            .map_err(|e| IndexError::Persist { path: dir.display().to_string(), message: e.to_string() })?;
        let manifest = self.manifest_for(&body);
        fs::write(dir.join(INDEX_FILE), &body).map_err(io_err)?;
        let mut m = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        m.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), m).map_err(io_err)?;
        Ok(manifest)
    }

    fn manifest_for(&self, body: &[u8]) -> IndexManifest {
        IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            tokenizer: TOKENIZER_VERSION.to_string(),
            stemmer: self.stemmer.clone(),
            passage_count: self.passages.len(),
            term_count: self.postings.len(),
            total_tokens: self.total_tokens,
            content_sha256: hex::encode(Sha256::digest(body)),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let persist = |message: String| IndexError::Persist { path: dir.display().to_string(), message };
        let read = |name: &str| {
            fs::read(dir.join(name))
                .map_err(|source| IndexError::Io { path: dir.join(name).display().to_string(), source })
        };
        let manifest: IndexManifest =
            serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| persist(e.to_string()))?;
        if manifest.format_version != INDEX_FORMAT_VERSION {
            return Err(persist(format!(
                "unsupported format version {} (expected {INDEX_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.tokenizer != TOKENIZER_VERSION {
            return Err(persist(format!("index built with tokenizer {}", manifest.tokenizer)));
        }
        let body = read(INDEX_FILE)?;
        if hex::encode(Sha256::digest(&body)) != manifest.content_sha256 {
            return Err(persist("content hash does not match manifest".into()));
        }
        let mut index: InvertedIndex = serde_json::from_slice(&body).map_err(|e| persist(e.to_string()))?;
        if index.stemmer != InflectionalStemmer.name() {
            return Err(persist(format!("index built with stemmer {}", index.stemmer)));
        }
        index.rebuild_lookup();
        Ok(index)
    }
}
