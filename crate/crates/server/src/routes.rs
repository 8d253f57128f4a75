use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use capy_core::clarifier::Clarifier;
use capy_core::insight::{extract_graph, resolve_cell, to_mermaid, GraphElement};
use capy_core::notebook::{parse_notebook, serialize_notebook, Notebook};
use capy_core::settings::Settings;
use capy_core::story::{export_html, update_blocks, BlockEdit, Feedback, StoryEngine, StoryOutcome};

use crate::error::ApiError;
use crate::events::sse_response;
use crate::session::{Service, Session};

type Shared = State<Arc<Service>>;
type ApiResult<T = Response> = Result<T, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/settings", get(get_settings).put(put_settings))
        .route("/sessions/{id}/notebook", get(get_notebook).put(put_notebook))
        .route("/sessions/{id}/query", post(start_query).delete(stop_query))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/clarify", post(clarify))
        .route("/sessions/{id}/insights", post(insights))
        .route("/sessions/{id}/insights/resolve", post(resolve))
        .route("/sessions/{id}/story", post(story).get(get_story))
        .route("/sessions/{id}/story/feedback", post(story_feedback))
        .route("/sessions/{id}/story/blocks", put(story_blocks))
        .route("/sessions/{id}/story/export.html", get(story_export))
        .with_state(service)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn parse_ipynb(body: &[u8]) -> ApiResult<Notebook> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Notebook::new());
    }
    parse_notebook(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_notebook", e.to_string()))
}

fn notebook_response(nb: &Notebook) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ipynb+json")], serialize_notebook(nb)).into_response()
}

fn summary(session: &Session) -> Value {
    let data = session.data();
    json!({
        "id": session.id,
        "run_state": session.run_state(),
        "cells": session.snapshot().len(),
        "threads": data.threads.len(),
        "has_story": data.story.is_some(),
        "has_graph": data.graph.is_some(),
    })
}

async fn create_session(State(service): Shared, body: Bytes) -> ApiResult {
    let session = service.create(parse_ipynb(&body)?)?;
    tracing::info!(session = %session.id, "session created");
    let location = format!("/sessions/{}", session.id);
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(summary(&session))).into_response())
}

async fn list_sessions(State(service): Shared) -> Json<Value> {
    Json(json!({ "sessions": service.ids() }))
}

async fn session_summary(State(service): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    Ok(Json(summary(&session)))
}

async fn get_settings(State(service): Shared, Path(id): Path<String>) -> ApiResult<Json<Settings>> {
    Ok(Json(service.get(&id)?.settings()))
}

async fn put_settings(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Settings>> {
    let session = service.get(&id)?;
    let settings: Settings = parse_json(&body)?;
    session.set_settings(settings, &service.config.provider_env)?;
    Ok(Json(session.settings()))
}

async fn get_notebook(State(service): Shared, Path(id): Path<String>) -> ApiResult {
    Ok(notebook_response(&service.get(&id)?.snapshot()))
}

async fn put_notebook(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let session = service.get(&id)?;
    session.replace_notebook(parse_ipynb(&body)?)?;
    Ok(notebook_response(&session.snapshot()))
}

#[derive(Deserialize)]
struct QueryBody {
    text: String,
}

async fn start_query(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let session = service.get(&id)?;
    let QueryBody { text } = parse_json(&body)?;
    let run_id = session.start_query(text, &service.config)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "run_state": session.run_state() }))).into_response())
}

async fn stop_query(State(service): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    Ok(Json(json!({ "run_state": session.stop() })))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

async fn events(State(service): Shared, Path(id): Path<String>, Query(q): Query<EventsQuery>, headers: HeaderMap) -> ApiResult {
    let session = service.get(&id)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let from = session.events.replay_from(q.after.or(last_id));
    Ok(sse_response(&session.events, from).into_response())
}

#[derive(Deserialize)]
struct ClarifyBody {
    cell_id: String,
    question: String,
}

async fn clarify(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let ClarifyBody { cell_id, question } = parse_json(&body)?;
    let _guard = session.begin_clarify(&cell_id)?;
    let gateway = session.gateway()?;
    let nb = session.snapshot();
    let thread = session.update(|d| d.threads.open_thread(&nb, &cell_id))??;
    let clarifier = Clarifier {
        gateway: &gateway,
        prompts: &service.config.prompts,
        context_budget: session.settings().budget.context_budget,
    };
    let turn = clarifier.ask(&nb, &thread, &question).await?;
    let answer = turn.answer.clone();
    let thread = session.update(|d| d.threads.append(&cell_id, turn).clone())?;
    Ok(Json(json!({ "cell_id": cell_id, "answer": answer, "thread": thread })))
}

fn busy(what: &str) -> ApiError {
    ApiError::conflict("busy", format!("a {what} request for this session is already in progress"))
}

async fn insights(State(service): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let _busy = session.insights_busy.try_lock().map_err(|_| busy("insights"))?;
    let gateway = session.gateway()?;
    let budget = session.settings().budget.context_budget;
    let graph = extract_graph(&gateway, &service.config.prompts, &session.snapshot(), budget).await?;
    let mermaid = to_mermaid(&graph);
    session.update(|d| d.graph = Some(graph.clone()))?;
    Ok(Json(json!({ "graph": graph, "mermaid": mermaid })))
}

#[derive(Deserialize)]
struct ResolveBody {
    element: GraphElement,
}

async fn resolve(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let ResolveBody { element } = parse_json(&body)?;
    let graph = session.data().graph.ok_or_else(|| ApiError::not_found("no insight graph; POST insights first"))?;
    let gateway = session.gateway()?;
    let budget = session.settings().budget.context_budget;
    let cell_id = resolve_cell(&gateway, &service.config.prompts, &graph, &element, &session.snapshot(), budget).await?;
    Ok(Json(json!({ "cell_id": cell_id })))
}

fn story_json(outcome: &StoryOutcome) -> Value {
    json!({
        "story": outcome.story,
        "dropped": outcome.dropped,
        "degraded": outcome.degraded(),
        "transcript": outcome.transcript,
    })
}

#[derive(Deserialize)]
struct StoryBody {
    #[serde(default)]
    instructions: String,
}

async fn story(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let StoryBody { instructions } = parse_json(&body)?;
    let _busy = session.story_busy.try_lock().map_err(|_| busy("story"))?;
    let gateway = session.gateway()?;
    let engine = StoryEngine { gateway: &gateway, prompts: &service.config.prompts, config: session.settings().story_config() };
    let outcome = engine.generate(&session.snapshot(), &instructions).await?;
    session.update(|d| d.story = Some(outcome.story.clone()))?;
    Ok(Json(story_json(&outcome)))
}

async fn get_story(State(service): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let story = session.data().story.ok_or_else(|| ApiError::not_found("no story generated yet"))?;
    Ok(Json(json!({ "story": story })))
}

#[derive(Deserialize)]
struct FeedbackBody {
    items: Vec<Feedback>,
}

async fn story_feedback(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let FeedbackBody { items } = parse_json(&body)?;
    let _busy = session.story_busy.try_lock().map_err(|_| busy("story"))?;
    let story = session.data().story.ok_or_else(|| ApiError::not_found("no story generated yet"))?;
    let gateway = session.gateway()?;
    let engine = StoryEngine { gateway: &gateway, prompts: &service.config.prompts, config: session.settings().story_config() };
    let outcome = engine.apply_feedback(&story, &items, &session.snapshot()).await?;
    session.update(|d| d.story = Some(outcome.story.clone()))?;
    Ok(Json(story_json(&outcome)))
}

#[derive(Deserialize)]
struct BlocksBody {
    blocks: Vec<BlockEdit>,
}

async fn story_blocks(State(service): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = service.get(&id)?;
    let BlocksBody { blocks } = parse_json(&body)?;
    let _busy = session.story_busy.try_lock().map_err(|_| busy("story"))?;
    let story = session.data().story.ok_or_else(|| ApiError::not_found("no story generated yet"))?;
    let (story, dropped) = update_blocks(&story, &blocks, &session.snapshot())?;
    session.update(|d| d.story = Some(story.clone()))?;
    Ok(Json(json!({ "story": story, "dropped": dropped })))
}

async fn story_export(State(service): Shared, Path(id): Path<String>) -> ApiResult<Html<String>> {
    let session = service.get(&id)?;
    let story = session.data().story.ok_or_else(|| ApiError::not_found("no story generated yet"))?;
    Ok(Html(export_html(&story, &session.snapshot())?))
}
