//! Entity linking and the knowledge-base inlink store.
//!
//! Two linkers ship with the crate: [`SpotlightClient`] speaks the DBpedia
//! Spotlight annotate protocol, and [`Gazetteer`] is an offline dictionary
//! matcher (case-insensitive, longest match first) used for hermetic runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_CONFIDENCE: f64 = 0.5;
const DBPEDIA_RESOURCE_PREFIX: &str = "http://dbpedia.org/resource/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MentionKind {
    NamedEntity,
    #[default]
    Concept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub entity_id: String,
    pub confidence: f64,
    /// Character offsets `[start, end)` into the annotated text.
    pub span: (usize, usize),
    pub kind: MentionKind,
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("confidence threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("linker unreachable at {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("linker at {url} answered with status {status}")]
    Status { url: String, status: u16 },
    #[error("malformed linker payload: {0}")]
    Malformed(String),
    #[error("{path}:{line}: {message}")]
    File { path: String, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that can annotate text with entity mentions.
pub trait Linker: Send + Sync {
    fn annotate(&self, text: &str, confidence: f64) -> Result<Vec<EntityMention>, LinkError>;
}

/// Annotates `text`, keeps mentions at or above `threshold`, sorted by span.
pub fn link(text: &str, linker: &dyn Linker, threshold: f64) -> Result<Vec<EntityMention>, LinkError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LinkError::Threshold(threshold));
    }
    let len = text.chars().count();
    let mut mentions = linker.annotate(text, threshold)?;
    for m in &mentions {
        let (start, end) = m.span;
        if !(start < end && end <= len) || !(0.0..=1.0).contains(&m.confidence) {
            return Err(LinkError::Malformed(format!(
                "mention `{}` has span {:?} / confidence {} for text of {len} chars",
                m.surface, m.span, m.confidence
            )));
        }
    }
    mentions.retain(|m| m.confidence >= threshold);
    mentions.sort_by(|a, b| a.span.cmp(&b.span).then_with(|| a.entity_id.cmp(&b.entity_id)));
    Ok(mentions)
}

/// Distinct entity ids among `mentions`.
pub fn entity_set(mentions: &[EntityMention]) -> BTreeSet<String> {
    mentions.iter().map(|m| m.entity_id.clone()).collect()
}

// --- gazetteer ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub surface: String,
    pub entity_id: String,
    #[serde(default = "one")]
    pub confidence: f64,
    #[serde(default)]
    pub kind: MentionKind,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    // keyed by first lowercase char; each bucket sorted longest first
    buckets: HashMap<char, Vec<(Vec<char>, GazetteerEntry)>>,
}

fn lower_chars(s: &str) -> Vec<char> {
    s.chars().map(lower_char).collect()
}

// one char in, one char out, so offsets survive lowercasing
fn lower_char(c: char) -> char {
    let mut l = c.to_lowercase();
    match (l.next(), l.next()) {
        (Some(x), None) => x,
        _ => c,
    }
}

impl Gazetteer {
    pub fn new(entries: impl IntoIterator<Item = GazetteerEntry>) -> Self {
        let mut buckets: HashMap<char, Vec<(Vec<char>, GazetteerEntry)>> = HashMap::new();
        for e in entries {
            let key = lower_chars(e.surface.trim());
            if let Some(&first) = key.first() {
                buckets.entry(first).or_default().push((key, e));
            }
        }
        for bucket in buckets.values_mut() {
            bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Self { buckets }
    }

    /// Reads newline-delimited JSON [`GazetteerEntry`] records.
    pub fn load(path: &Path) -> Result<Self, LinkError> {
        let entries = read_jsonl::<GazetteerEntry>(path)?;
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Linker for Gazetteer {
    fn annotate(&self, text: &str, _confidence: f64) -> Result<Vec<EntityMention>, LinkError> {
        let original: Vec<char> = text.chars().collect();
        let chars = lower_chars(text);
        let n = chars.len();
        let boundary = |i: usize| i == 0 || i >= n || !chars[i - 1].is_alphanumeric() || !chars[i].is_alphanumeric();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let word_start = chars[i].is_alphanumeric() && (i == 0 || !chars[i - 1].is_alphanumeric());
            let hit = word_start.then(|| self.buckets.get(&chars[i])).flatten().and_then(|bucket| {
                bucket.iter().find(|(key, _)| {
                    let end = i + key.len();
                    end <= n && chars[i..end] == key[..] && boundary(end)
                })
            });
            match hit {
                Some((key, entry)) => {
                    let end = i + key.len();
                    out.push(EntityMention {
                        surface: original[i..end].iter().collect(),
                        entity_id: entry.entity_id.clone(),
                        confidence: entry.confidence,
                        span: (i, end),
                        kind: entry.kind,
                    });
                    i = end;
                }
                None => i += 1,
            }
        }
        Ok(out)
    }
}

// --- spotlight ---

/// Client for a DBpedia Spotlight compatible `annotate` endpoint.
pub struct SpotlightClient {
    client: Client,
    endpoint: String,
}

impl SpotlightClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, LinkError> {
        let endpoint = endpoint.into();
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LinkError::Unreachable { url: endpoint.clone(), message: e.to_string() })?;
        Ok(Self { client, endpoint })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// Issues the annotate request and parses the resource list.
pub fn spotlight_annotate(
    text: &str,
    confidence: f64,
    client: &SpotlightClient,
) -> Result<Vec<EntityMention>, LinkError> {
    let confidence_field = confidence.to_string();
    let response = client
        .client
        .post(&client.endpoint)
        .header(reqwest::header::ACCEPT, "application/json")
        .form(&[("text", text), ("confidence", confidence_field.as_str())])
        .send()
        .map_err(|e| LinkError::Unreachable { url: client.endpoint.clone(), message: e.to_string() })?;
    let status = response.status();
    if !status.is_success() {
        return Err(LinkError::Status { url: client.endpoint.clone(), status: status.as_u16() });
    }
    let body =
        response.text().map_err(|e| LinkError::Unreachable { url: client.endpoint.clone(), message: e.to_string() })?;
    parse_spotlight_response(&body, text)
}

impl Linker for SpotlightClient {
    fn annotate(&self, text: &str, confidence: f64) -> Result<Vec<EntityMention>, LinkError> {
        spotlight_annotate(text, confidence, self)
    }
}

/// Parses a Spotlight JSON body. Attribute values may be strings or numbers.
pub fn parse_spotlight_response(body: &str, text: &str) -> Result<Vec<EntityMention>, LinkError> {
    let doc: Value = serde_json::from_str(body).map_err(|e| LinkError::Malformed(e.to_string()))?;
    let resources = match doc.get("Resources") {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Array(items)) => items,
        Some(other) => return Err(LinkError::Malformed(format!("`Resources` is not an array: {other}"))),
    };
    let text_len = text.chars().count();
    resources
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let field = |name: &str| {
                r.get(name).ok_or_else(|| LinkError::Malformed(format!("resource {i} is missing `{name}`")))
            };
            let uri = as_string(field("@URI")?, "@URI")?;
            let surface = as_string(field("@surfaceForm")?, "@surfaceForm")?;
            let offset = as_number(field("@offset")?, "@offset")?;
            let score = as_number(field("@similarityScore")?, "@similarityScore")?;
            if offset < 0.0 || offset.fract() != 0.0 {
                return Err(LinkError::Malformed(format!("resource {i} has offset {offset}")));
            }
            let start = offset as usize;
            let end = start + surface.chars().count();
            if surface.is_empty() || end > text_len {
                return Err(LinkError::Malformed(format!(
                    "resource {i} span ({start}, {end}) outside text of {text_len} chars"
                )));
            }
            let typed = r.get("@types").and_then(Value::as_str).is_some_and(|t| !t.trim().is_empty());
            Ok(EntityMention {
                entity_id: uri.strip_prefix(DBPEDIA_RESOURCE_PREFIX).unwrap_or(&uri).to_string(),
                surface,
                confidence: score.clamp(0.0, 1.0),
                span: (start, end),
                kind: if typed { MentionKind::NamedEntity } else { MentionKind::Concept },
            })
        })
        .collect()
}

fn as_string(v: &Value, name: &str) -> Result<String, LinkError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(LinkError::Malformed(format!("`{name}` is not a string"))),
    }
}

fn as_number(v: &Value, name: &str) -> Result<f64, LinkError> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| LinkError::Malformed(format!("`{name}` is not numeric: {v}")))
}

// --- knowledge base ---

/// Inlink sets per entity plus the KB size, as used by the relatedness measure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBaseStore {
    inlinks: BTreeMap<String, BTreeSet<String>>,
    total_entities: usize,
}

static EMPTY: BTreeSet<String> = BTreeSet::new();

impl KnowledgeBaseStore {
    /// Builds a store; `total_entities` defaults to the number of distinct ids seen.
    pub fn new(inlinks: BTreeMap<String, BTreeSet<String>>, total_entities: Option<usize>) -> Result<Self, String> {
        let mut ids: BTreeSet<&str> = inlinks.keys().map(String::as_str).collect();
        for set in inlinks.values() {
            ids.extend(set.iter().map(String::as_str));
        }
        let total = match total_entities {
            Some(t) if t < ids.len() => {
                return Err(format!("total_entities {t} is below the {} distinct ids present", ids.len()))
            }
            Some(t) => t,
            None => ids.len(),
        };
        Ok(Self { inlinks, total_entities: total })
    }

    pub fn inlinks(&self, entity: &str) -> &BTreeSet<String> {
        self.inlinks.get(entity).unwrap_or(&EMPTY)
    }

    pub fn total_entities(&self) -> usize {
        self.total_entities
    }

    pub fn len(&self) -> usize {
        self.inlinks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inlinks.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum KbLine {
    Header { total_entities: usize },
    Record { entity_id: String, inlinks: Vec<String> },
}

/// Loads newline-delimited JSON `{entity_id, inlinks}` records, optionally
/// preceded anywhere by a `{total_entities}` header record.
pub fn load_kb(path: &Path) -> Result<KnowledgeBaseStore, LinkError> {
    let mut inlinks: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut header = None;
    for (line_no, line) in read_jsonl::<KbLine>(path)?.into_iter().enumerate() {
        match line {
            KbLine::Header { total_entities } => {
                if header.replace(total_entities).is_some() {
                    return Err(LinkError::File {
                        path: path.display().to_string(),
                        line: line_no + 1,
                        message: "second header record".into(),
                    });
                }
            }
            KbLine::Record { entity_id, inlinks: links } => {
                inlinks.entry(entity_id).or_default().extend(links);
            }
        }
    }
    KnowledgeBaseStore::new(inlinks, header).map_err(|message| LinkError::File {
        path: path.display().to_string(),
        line: 0,
        message,
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LinkError> {
    let file = fs::File::open(path).map_err(|source| LinkError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LinkError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LinkError::File {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
