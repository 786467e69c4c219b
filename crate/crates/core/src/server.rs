//! JSON HTTP service over [`Pipeline`].
//!
//! Routes:
//!
//! | method | path | body |
//! |--------|------|------|
//! | `POST` | `/sessions` | optional `{"topic": "...", "overrides": {...}}` |
//! | `GET`  | `/sessions/{id}` | |
//! | `POST` | `/sessions/{id}/turns` | `{"query": "...", "overrides": {...}}` |
//! | `POST` | `/sessions/{id}/turns/{n}/rescore` | `{"gamma": .., "method": .., "min_length": .., "include_query": ..}` |
//! | `GET`  | `/healthz` | |
//!
//! A session runs one turn at a time; a second request while a turn or rescore
//! is in flight gets `409 Conflict`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::answer::{AnswerError, ScoringMethod};
use crate::conversation::{Conversation, RerankError};
use crate::graph::GraphDocument;
use crate::linking::LinkError;
use crate::pipeline::{
    CandidateView, Composition, Pipeline, PipelineError, RunRecord, Timings, TurnOverrides, TurnResult, TurnState,
};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Config(_) | PipelineError::Graph(_) | PipelineError::Answer(AnswerError::Config(_)) => {
                StatusCode::BAD_REQUEST
            }
            PipelineError::Rewrite { .. }
            | PipelineError::Rerank(RerankError::Adapter { .. })
            | PipelineError::Answer(AnswerError::Adapter(_))
            | PipelineError::Link(LinkError::Unreachable { .. } | LinkError::Status { .. } | LinkError::Malformed(_)) => {
                StatusCode::BAD_GATEWAY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Everything the UI needs to render one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn: usize,
    pub raw_query: String,
    pub prompt: String,
    pub rewritten_query: String,
    pub method: ScoringMethod,
    pub gamma: f64,
    pub passages: Vec<CandidateView>,
    pub selected: Vec<String>,
    pub graph: GraphDocument,
    pub salient_entities: Vec<(String, f64)>,
    pub answer: String,
    pub answer_words: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<String>,
    pub timings: Timings,
    pub record: RunRecord,
}

impl TurnView {
    fn new(result: TurnResult) -> Self {
        let TurnResult { state, composition, record, timings } = result;
        Self {
            turn: state.turn,
            raw_query: state.raw_query,
            prompt: state.prompt,
            rewritten_query: state.rewritten_query,
            method: composition.method,
            gamma: composition.gamma,
            passages: composition.passages,
            selected: composition.selected,
            graph: composition.graph,
            salient_entities: composition.salient_entities,
            answer: composition.answer,
            answer_words: composition.answer_words,
            fallbacks: composition.fallbacks,
            timings,
            record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreView {
    pub turn: usize,
    #[serde(flatten)]
    pub composition: Composition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub topic: String,
    pub created_unix: u64,
    pub overrides: TurnOverrides,
    pub turns: Vec<TurnView>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct CreateSession {
    topic: Option<String>,
    overrides: TurnOverrides,
}

#[derive(Debug, Deserialize)]
struct TurnRequest {
    query: String,
    #[serde(default)]
    overrides: TurnOverrides,
}

struct Session {
    conversation: Conversation,
    overrides: TurnOverrides,
    created_unix: u64,
    states: Vec<TurnState>,
    views: Vec<TurnView>,
}

pub struct AppState {
    pipeline: Arc<Pipeline>,
    sessions: Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>) -> Self {
        Self { pipeline, sessions: Mutex::new(BTreeMap::new()), next_id: AtomicU64::new(1) }
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/turns/{n}/rescore", post(rescore))
        .with_state(Arc::new(AppState::new(pipeline)))
}

/// Serves until ctrl-c.
pub async fn serve(listener: TcpListener, pipeline: Arc<Pipeline>) -> std::io::Result<()> {
    axum::serve(listener, router(pipeline))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    app.pipeline.settings().apply(&req.overrides)?;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let topic = req.topic.unwrap_or_else(|| id.clone());
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session {
        conversation: Conversation::new(topic.clone()),
        overrides: req.overrides,
        created_unix,
        states: Vec::new(),
        views: Vec::new(),
    };
    app.sessions.lock().expect("session table lock").insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(SessionView { session_id: id, topic, created_unix, overrides: req.overrides, turns: Vec::new() }),
    ))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let session = app.session(&id)?;
    let s = session.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        topic: s.conversation.topic_id.clone(),
        created_unix: s.created_unix,
        overrides: s.overrides,
        turns: s.views.clone(),
    }))
}

fn busy(id: &str) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, format!("session `{id}` is busy with another request"))
}

async fn post_turn(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<TurnView> {
    let session = app.session(&id)?;
    let mut guard = session.try_lock_owned().map_err(|_| busy(&id))?;
    let req: TurnRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))?;
    if req.query.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "query must not be empty"));
    }
    let pipeline = Arc::clone(&app.pipeline);
    let view = tokio::task::spawn_blocking(move || {
        let s = &mut *guard;
        let overrides = s.overrides.merged(req.overrides);
        let result = pipeline.run_turn(&mut s.conversation, &req.query, &overrides)?;
        s.states.push(result.state.clone());
        let view = TurnView::new(result);
        s.views.push(view.clone());
        Ok::<_, PipelineError>(view)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(view))
}

async fn rescore(
    State(app): State<Arc<AppState>>,
    Path((id, n)): Path<(String, usize)>,
    body: Bytes,
) -> ApiResult<RescoreView> {
    let session = app.session(&id)?;
    let guard = session.try_lock_owned().map_err(|_| busy(&id))?;
    let overrides: TurnOverrides = parse_body(&body)?;
    let state = n
        .checked_sub(1)
        .and_then(|i| guard.states.get(i))
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("session `{id}` has no turn {n}")))?;
    let pipeline = Arc::clone(&app.pipeline);
    let composition = tokio::task::spawn_blocking(move || {
        let out = pipeline.rescore(&state, &overrides);
        drop(guard);
        out
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(RescoreView { turn: n, composition }))
}
