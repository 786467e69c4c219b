//! JSON-over-HTTP clients for the rewriter, re-ranker and summarizer services.
//!
//! Each service speaks one request, one response over `POST` with UTF-8 JSON
//! bodies. Request structs serialize with a fixed field order, so the bytes on
//! the wire are reproducible.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{SummarizerAdapter, SummaryParams};
use crate::conversation::{RerankPair, RerankerAdapter, RewriterAdapter};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("{url} answered with status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("malformed response from {url}: {message}")]
    Malformed { url: String, message: String },
    #[error("invalid adapter output: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    client: Client,
    url: String,
}

impl JsonEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, AdapterError> {
        let url = url.into();
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AdapterError::Transport { url: url.clone(), message: e.to_string() })?;
        Ok(Self { client, url })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&self, request: &Req) -> Result<Resp, AdapterError> {
        let body = serde_json::to_vec(request).map_err(|e| AdapterError::Invalid(e.to_string()))?;
        let response = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json; charset=utf-8")
            .header(reqwest::header::ACCEPT, "application/json")
            .body(body)
            .send()
            .map_err(|e| AdapterError::Transport { url: self.url.clone(), message: e.to_string() })?;
        let status = response.status();
        let bytes =
            response.bytes().map_err(|e| AdapterError::Transport { url: self.url.clone(), message: e.to_string() })?;
        if !status.is_success() {
            return Err(AdapterError::Status {
                url: self.url.clone(),
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
            });
        }
        serde_json::from_slice(&bytes)
            .map_err(|e| AdapterError::Malformed { url: self.url.clone(), message: e.to_string() })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerankRequest {
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerankResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SummarizeRequest {
    pub text: String,
    pub min_length: usize,
    pub max_length: usize,
    pub beams: usize,
    pub no_repeat_ngram: usize,
    pub early_stopping: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummarizeResponse {
    pub summary: String,
}

pub struct HttpRewriter(pub JsonEndpoint);

impl RewriterAdapter for HttpRewriter {
    fn rewrite(&self, prompt: &str) -> Result<String, AdapterError> {
        let resp: RewriteResponse = self.0.call(&RewriteRequest { prompt: prompt.to_string() })?;
        Ok(resp.text)
    }
}

pub struct HttpReranker(pub JsonEndpoint);

impl RerankerAdapter for HttpReranker {
    fn score(&self, pairs: &[RerankPair<'_>]) -> Result<Vec<f64>, AdapterError> {
        let request =
            RerankRequest { pairs: pairs.iter().map(|p| (p.query.to_string(), p.passage.to_string())).collect() };
        let resp: RerankResponse = self.0.call(&request)?;
        Ok(resp.scores)
    }
}

pub struct HttpSummarizer(pub JsonEndpoint);

impl SummarizerAdapter for HttpSummarizer {
    fn summarize(&self, input: &str, params: &SummaryParams) -> Result<String, AdapterError> {
        let resp: SummarizeResponse = self.0.call(&SummarizeRequest {
            text: input.to_string(),
            min_length: params.min_length,
            max_length: params.max_length,
            beams: params.beams,
            no_repeat_ngram: params.no_repeat_ngram,
            early_stopping: params.early_stopping,
        })?;
        Ok(resp.summary)
    }
}
