mod common;

use std::fs;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use common::{fixture, fixture_index, spawn_server};
use convkg::answer::{SummarizerAdapter, SummaryParams};
use convkg::conversation::{RerankPair, RerankerAdapter, RewriterAdapter};
use convkg::linking::{link, parse_spotlight_response, LinkError, Linker, MentionKind, SpotlightClient};
use convkg::pipeline::{AdapterConfig, LinkerConfig, Pipeline, PipelineConfig, Topic};
use convkg::remote::{AdapterError, HttpReranker, HttpRewriter, HttpSummarizer, JsonEndpoint};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Recorded {
    path: &'static str,
    content_type: String,
    accept: String,
    body: Vec<u8>,
}

type Log = Arc<Mutex<Vec<Recorded>>>;

fn record(log: &Log, path: &'static str, headers: &HeaderMap, body: &Bytes) {
    let h = |k: &str| headers.get(k).and_then(|v| v.to_str().ok()).unwrap_or_default().to_string();
    log.lock().unwrap().push(Recorded {
        path,
        content_type: h("content-type"),
        accept: h("accept"),
        body: body.to_vec(),
    });
}

fn url_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' => {
                out.push(u8::from_str_radix(&s[i + 1..i + 3], 16).unwrap());
                i += 2;
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8(out).unwrap()
}

fn form_field(body: &[u8], key: &str) -> Option<String> {
    std::str::from_utf8(body)
        .unwrap()
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| url_decode(v))
}

/// Mock model services. The rewriter appends "Hubble Space Telescope" to the
/// current query, the reranker prefers shorter passages, the summarizer keeps
/// the first eight words and the annotator links every "Hubble".
fn mock_services(log: Log) -> Router {
    Router::new()
        .route(
            "/rewrite",
            post(|State(log): State<Log>, headers: HeaderMap, body: Bytes| async move {
                record(&log, "/rewrite", &headers, &body);
                let v: Value = serde_json::from_slice(&body).unwrap();
                let prompt = v["prompt"].as_str().unwrap();
                let current = prompt.split(" [CTX]").next().unwrap();
                Json(json!({ "text": format!("{current} Hubble Space Telescope") }))
            }),
        )
        .route(
            "/rerank",
            post(|State(log): State<Log>, headers: HeaderMap, body: Bytes| async move {
                record(&log, "/rerank", &headers, &body);
                let v: Value = serde_json::from_slice(&body).unwrap();
                let scores: Vec<f64> =
                    v["pairs"].as_array().unwrap().iter().map(|p| -(p[1].as_str().unwrap().len() as f64)).collect();
                Json(json!({ "scores": scores }))
            }),
        )
        .route(
            "/summarize",
            post(|State(log): State<Log>, headers: HeaderMap, body: Bytes| async move {
                record(&log, "/summarize", &headers, &body);
                let v: Value = serde_json::from_slice(&body).unwrap();
                let words: Vec<&str> = v["text"].as_str().unwrap().split_whitespace().take(8).collect();
                Json(json!({ "summary": words.join(" ") }))
            }),
        )
        .route(
            "/annotate",
            post(|State(log): State<Log>, headers: HeaderMap, body: Bytes| async move {
                record(&log, "/annotate", &headers, &body);
                let text = form_field(&body, "text").unwrap();
                let chars: Vec<char> = text.chars().collect();
                let needle: Vec<char> = "Hubble".chars().collect();
                let resources: Vec<Value> = (0..chars.len().saturating_sub(needle.len() - 1))
                    .filter(|&i| chars[i..i + needle.len()] == needle[..])
                    .map(|i| {
                        json!({
                            "@URI": "http://dbpedia.org/resource/Hubble_Space_Telescope",
                            "@surfaceForm": "Hubble",
                            "@offset": i.to_string(),
                            "@similarityScore": "0.93",
                            "@types": "DBpedia:Instrument"
                        })
                    })
                    .collect();
                Json(json!({ "@text": text, "Resources": resources }))
            }),
        )
        .route("/fail", post(|| async { (StatusCode::SERVICE_UNAVAILABLE, "model is loading") }))
        .route("/garbage", post(|| async { "not json" }))
        .with_state(log)
}

fn endpoint(base: &str, path: &str) -> JsonEndpoint {
    JsonEndpoint::new(format!("{base}{path}"), Duration::from_secs(5)).unwrap()
}

#[test]
fn summarizer_request_is_byte_exact() {
    let log: Log = Arc::default();
    let base = spawn_server(mock_services(log.clone()));
    let s = HttpSummarizer(endpoint(&base, "/summarize"));
    let params = SummaryParams { min_length: 50, max_length: 120, beams: 4, no_repeat_ngram: 3, early_stopping: true };
    let out = s.summarize("Hubble was launched in 1990. It \"sees\" far.", &params).unwrap();
    assert_eq!(out, "Hubble was launched in 1990. It \"sees\" far.");
    let rec = log.lock().unwrap()[0].clone();
    assert_eq!(rec.path, "/summarize");
    assert_eq!(rec.content_type, "application/json; charset=utf-8");
    assert_eq!(rec.accept, "application/json");
    assert_eq!(
        String::from_utf8(rec.body).unwrap(),
        r#"{"text":"Hubble was launched in 1990. It \"sees\" far.","min_length":50,"max_length":120,"beams":4,"no_repeat_ngram":3,"early_stopping":true}"#
    );
}

#[test]
fn rewriter_and_reranker_wire_formats() {
    let log: Log = Arc::default();
    let base = spawn_server(mock_services(log.clone()));
    let rw = HttpRewriter(endpoint(&base, "/rewrite"));
    assert_eq!(
        rw.rewrite("when was it launched? [CTX] q1 p1").unwrap(),
        "when was it launched? Hubble Space Telescope"
    );
    let rr = HttpReranker(endpoint(&base, "/rerank"));
    let pairs = [
        RerankPair { query: "q", passage: "long passage text", first_stage_score: -1.0 },
        RerankPair { query: "q", passage: "short", first_stage_score: -2.0 },
    ];
    assert_eq!(rr.score(&pairs).unwrap(), vec![-17.0, -5.0]);
    let bodies: Vec<String> = log.lock().unwrap().iter().map(|r| String::from_utf8(r.body.clone()).unwrap()).collect();
    assert_eq!(bodies[0], r#"{"prompt":"when was it launched? [CTX] q1 p1"}"#);
    assert_eq!(bodies[1], r#"{"pairs":[["q","long passage text"],["q","short"]]}"#);
}

#[test]
fn adapter_failures_are_typed() {
    let base = spawn_server(mock_services(Arc::default()));
    let params = SummaryParams { min_length: 1, max_length: 2, beams: 1, no_repeat_ngram: 0, early_stopping: false };
    match HttpSummarizer(endpoint(&base, "/fail")).summarize("x", &params) {
        Err(AdapterError::Status { status, body, .. }) => {
            assert_eq!(status, 503);
            assert_eq!(body, "model is loading");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        HttpSummarizer(endpoint(&base, "/garbage")).summarize("x", &params),
        Err(AdapterError::Malformed { .. })
    ));
    // nothing listens on the discard port
    assert!(matches!(
        HttpSummarizer(endpoint("http://127.0.0.1:9", "/s")).summarize("x", &params),
        Err(AdapterError::Transport { .. })
    ));
}

#[test]
fn spotlight_fixture_and_client() {
    let text = "Hubble was launched by NASA aboard Discovery from Kennedy Space Center.";
    let body = fs::read_to_string(fixture("spotlight_response.json")).unwrap();
    let m = parse_spotlight_response(&body, text).unwrap();
    let got: Vec<(&str, (usize, usize), MentionKind)> =
        m.iter().map(|m| (m.entity_id.as_str(), m.span, m.kind)).collect();
    assert_eq!(
        got,
        vec![
            ("Hubble_Space_Telescope", (0, 6), MentionKind::NamedEntity),
            ("NASA", (23, 27), MentionKind::NamedEntity),
            ("Space_Shuttle_Discovery", (35, 44), MentionKind::Concept),
            ("Kennedy_Space_Center", (50, 70), MentionKind::NamedEntity),
        ]
    );
    let bad = fs::read_to_string(fixture("spotlight_missing_offset.json")).unwrap();
    let err = parse_spotlight_response(&bad, text).unwrap_err();
    assert_eq!(err.to_string(), LinkError::Malformed("resource 1 is missing `@offset`".into()).to_string());

    let log: Log = Arc::default();
    let base = spawn_server(mock_services(log.clone()));
    let client = SpotlightClient::new(format!("{base}/annotate"), Duration::from_secs(5)).unwrap();
    let m = link("Hubble & the Hubble key", &client, 0.5).unwrap();
    assert_eq!(m.iter().map(|m| m.span).collect::<Vec<_>>(), vec![(0, 6), (13, 19)]);
    let rec = log.lock().unwrap()[0].clone();
    assert_eq!(rec.accept, "application/json");
    assert_eq!(rec.content_type, "application/x-www-form-urlencoded");
    assert_eq!(String::from_utf8(rec.body).unwrap(), "text=Hubble+%26+the+Hubble+key&confidence=0.5");
    assert!(m.iter().all(|m| m.confidence == 0.93));

    let down = SpotlightClient::new("http://127.0.0.1:9/annotate", Duration::from_secs(2)).unwrap();
    assert!(matches!(down.annotate("x", 0.5), Err(LinkError::Unreachable { .. })));
}

fn remote_config(base: &str, index: &std::path::Path) -> PipelineConfig {
    let remote = |p: &str| AdapterConfig { endpoint: Some(format!("{base}{p}")), fallback_to_stub: false };
    PipelineConfig {
        index: index.to_path_buf(),
        kb: Some(fixture("kb.jsonl")),
        linker: Some(LinkerConfig::Spotlight { endpoint: format!("{base}/annotate") }),
        rewriter: remote("/rewrite"),
        reranker: remote("/rerank"),
        summarizer: remote("/summarize"),
        ..PipelineConfig::default()
    }
}

#[test]
fn pipeline_runs_against_remote_services() {
    let log: Log = Arc::default();
    let base = spawn_server(mock_services(log.clone()));
    let dir = tempfile::tempdir().unwrap();
    fixture_index().save(dir.path()).unwrap();
    let pipeline = Pipeline::from_config(&remote_config(&base, dir.path())).unwrap();
    let topics =
        vec![Topic { topic: "9".into(), turns: vec!["What is Hubble?".into(), "When was it launched?".into()] }];
    let records = pipeline.run_topics(&topics).unwrap();
    assert_eq!(records[0].rewritten_query, "What is Hubble?");
    assert_eq!(records[1].rewritten_query, "When was it launched? Hubble Space Telescope");
    assert_eq!(records[1].answer.split_whitespace().count(), 8);
    assert!(records.iter().all(|r| r.fallbacks.is_empty()));
    let paths: Vec<&str> = log.lock().unwrap().iter().map(|r| r.path).collect();
    // the first turn skips the rewriter
    assert_eq!(paths.iter().filter(|p| **p == "/rewrite").count(), 1);
    assert_eq!(paths.iter().filter(|p| **p == "/summarize").count(), 2);
    assert_eq!(paths.iter().filter(|p| **p == "/rerank").count(), 2);
}

#[test]
fn unreachable_services_fall_back_when_allowed() {
    let dir = tempfile::tempdir().unwrap();
    fixture_index().save(dir.path()).unwrap();
    let mut cfg = remote_config("http://127.0.0.1:9", dir.path());
    cfg.timeout_secs = 2;
    let topics =
        vec![Topic { topic: "9".into(), turns: vec!["What is Hubble?".into(), "When was it launched?".into()] }];
    let strict = Pipeline::from_config(&cfg).unwrap();
    assert!(strict.run_topics(&topics).is_err());

    for a in [&mut cfg.rewriter, &mut cfg.reranker, &mut cfg.summarizer] {
        a.fallback_to_stub = true;
    }
    cfg.linker_fallback = true;
    let lenient = Pipeline::from_config(&cfg).unwrap();
    let records = lenient.run_topics(&topics).unwrap();
    assert!(records[1].fallbacks.contains(&"rewriter".to_string()));
    assert!(records[1].fallbacks.contains(&"reranker".to_string()));
    assert!(records[1].fallbacks.contains(&"summarizer".to_string()));
    assert!(records[1].fallbacks.contains(&"linker:query".to_string()));
    assert_eq!(records[1].rewritten_query, "When was it launched?");
}
