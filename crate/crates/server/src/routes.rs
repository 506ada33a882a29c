use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use longmem::chronicle::{new_episode, validate_episode, write_jsonl, Episode, SpeakerId, TimeGap};
use longmem::context::Granularity;
use longmem::eval::{aggregate, HumanEvalRecord};
use longmem::memory::MemoryEntry;
use longmem::pipeline::{ChatTurnResponse, Conversation, ReplyRequest, TurnRequest};
use longmem::retrieval::{chunk_dialogue, chunk_memory, MemoryIndex, ScoredDoc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{ApiError, AppState};

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

pub(crate) fn v1() -> Router<Arc<AppState>> {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/config", get(default_config))
        .route("/episodes", post(create_episode).get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/sessions", post(open_session))
        .route("/episodes/{id}/turn", post(turn))
        .route("/episodes/{id}/reply", post(reply))
        .route("/episodes/{id}/memory", get(memory))
        .route("/episodes/{id}/retrieve", post(retrieve))
        .route("/eval/human", post(record_human_eval))
        .route("/eval/human/aggregate", get(human_eval_aggregate))
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

/// Runs `f` on the episode's conversation in the blocking pool.
async fn with_conversation<T: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&AppState, &mut Conversation) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let conv = state.store.get(id)?;
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let mut guard = conv.lock();
        let out = f(&state, &mut guard);
        persist(&state, &guard.episode);
        out
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn persist(state: &AppState, episode: &Episode) {
    let Some(dir) = &state.episode_dir else { return };
    let path = dir.join(format!("{}.jsonl", episode.id));
    let result = std::fs::File::create(&path)
        .map_err(longmem::Error::from)
        .and_then(|f| write_jsonl(std::io::BufWriter::new(f), [episode]));
    if let Err(e) = result {
        tracing::warn!(path = %path.display(), error = %e, "could not persist episode");
    }
}

async fn default_config(State(state): Shared) -> Json<Value> {
    Json(json!(state.default_config))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateEpisode {
    pub personas: [Vec<String>; 2],
}

async fn create_episode(
    State(state): Shared,
    payload: Result<Json<CreateEpisode>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let [a, b] = body(payload)?.personas;
    let episode = new_episode(a, b)?;
    persist(&state, &episode);
    let id = state.store.insert(episode.clone());
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "episode": episode }))))
}

async fn list_episodes(State(state): Shared) -> Json<Value> {
    Json(json!({ "ids": state.store.ids() }))
}

async fn get_episode(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let conv = state.store.get(&id)?;
    let c = conv.lock();
    let report = validate_episode(&c.episode);
    Ok(Json(json!({
        "episode": c.episode,
        "valid": report.is_valid(),
        "violations": report.violations,
        "memory_entries": c.memory.entries_written(),
    })))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OpenSession {
    #[serde(default)]
    pub gap: Option<TimeGap>,
}

async fn open_session(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<OpenSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let gap = body(payload)?.gap.map(|g| TimeGap::new(g.amount, g.unit)).transpose()?;
    let session = with_conversation(&state, &id, move |_, c| Ok(c.open_session(gap)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "session": session, "gap_before": gap }))))
}

async fn turn(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<TurnRequest>, JsonRejection>,
) -> ApiResult<Json<ChatTurnResponse>> {
    let req = body(payload)?;
    with_conversation(&state, &id, move |s, c| Ok(c.turn(&req, &s.backends, &s.default_config)?))
        .await
        .map(Json)
}

async fn reply(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<ReplyRequest>, JsonRejection>,
) -> ApiResult<Json<ChatTurnResponse>> {
    let req = body(payload)?;
    with_conversation(&state, &id, move |s, c| Ok(c.reply(&req, &s.backends, &s.default_config)?))
        .await
        .map(Json)
}

async fn memory(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<Vec<MemoryEntry>>> {
    let conv = state.store.get(&id)?;
    let entries = conv.lock().memory.all().to_vec();
    Ok(Json(entries))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieveSource {
    #[default]
    Memory,
    Dialogue,
}

/// Ad-hoc retrieval over everything the episode holds, one document per
/// memory entry or per utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query: String,
    pub n: usize,
    #[serde(default)]
    pub source: RetrieveSource,
    /// Perspective for rendering memory lines.
    #[serde(default = "default_perspective")]
    pub speaker: SpeakerId,
}

fn default_perspective() -> SpeakerId {
    SpeakerId::SpeakerB
}

async fn retrieve(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<Json<Vec<ScoredDoc>>> {
    let req = body(payload)?;
    if req.n == 0 {
        return Err(ApiError::BadRequest("n must be at least 1".into()));
    }
    let docs = with_conversation(&state, &id, move |s, c| {
        let now = c.episode.latest_session().map_or(1, |x| x.index);
        let chunks = match req.source {
            RetrieveSource::Memory => {
                let entries: Vec<&MemoryEntry> = c.memory.all().iter().collect();
                chunk_memory(&entries, &c.episode, now, req.speaker, Granularity::Utterance, false)
            }
            RetrieveSource::Dialogue => chunk_dialogue(&c.episode, 1..now + 1, Granularity::Utterance, None),
        };
        let index = MemoryIndex::build(chunks, s.backends.embedder.as_ref())?;
        Ok(index.retrieve(&req.query, req.n, s.backends.embedder.as_ref())?)
    })
    .await?;
    Ok(Json(docs))
}

async fn record_human_eval(
    State(state): Shared,
    payload: Result<Json<HumanEvalRecord>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let record = body(payload)?;
    record.validate()?;
    let turns = record.turns.len();
    let state2 = Arc::clone(&state);
    tokio::task::spawn_blocking(move || state2.eval_log.append(&record))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(json!({ "status": "recorded", "turns": turns })))
}

async fn human_eval_aggregate(State(state): Shared) -> ApiResult<Json<Value>> {
    let state2 = Arc::clone(&state);
    let records = tokio::task::spawn_blocking(move || state2.eval_log.read())
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let models: Vec<Value> = aggregate(&records)
        .into_iter()
        .map(|a| json!({ "summary": a.summary_line(), "aggregate": a }))
        .collect();
    Ok(Json(json!({ "records": records.len(), "models": models })))
}
