use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EvalRequest, IngestRequest, MessageRequest, RetrieveRequest, RunStatus, SessionRequest};
use crate::error::ApiError;

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/ingest", post(ingest))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/video/analyze", post(analyze_video))
        .route("/retrieve", post(retrieve))
        .route("/ledger/verify", get(verify_ledger))
        .route("/patients/{id}/history", get(history))
        .route("/eval/run", post(run_eval))
        .route("/eval/runs/{id}", get(eval_run))
        .with_state(engine)
}

/// Binds `engine.config().listen` and serves until ctrl-c.
pub async fn serve(engine: Arc<Engine>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&engine.config().listen).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs a synchronous engine call off the async workers.
async fn blocking<T, F>(engine: Arc<Engine>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Arc<Engine>) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&engine)).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn ok<T: Serialize>(value: T) -> Response {
    Json(value).into_response()
}

async fn healthz() -> Response {
    ok(serde_json::json!({ "status": "ok" }))
}

async fn ingest(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let request: IngestRequest = parse(&body)?;
    blocking(engine, move |e| e.ingest(request)).await.map(ok)
}

async fn create_session(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let request: SessionRequest = parse(&body)?;
    let session = blocking(engine, move |e| e.create_session(request)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn get_session(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    engine.session(&id).map(ok)
}

async fn post_message(State(engine): State<Arc<Engine>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let request: MessageRequest = parse(&body)?;
    blocking(engine, move |e| e.post_message(&id, request)).await.map(ok)
}

#[derive(Debug, Deserialize)]
struct VideoQuery {
    session_id: Option<String>,
}

async fn analyze_video(State(engine): State<Arc<Engine>>, Query(q): Query<VideoQuery>, body: Bytes) -> Result<Response, ApiError> {
    let input: mmds_core::videoparse::VideoInput = parse(&body)?;
    blocking(engine, move |e| e.analyze_video(&input, q.session_id.as_deref())).await.map(ok)
}

async fn retrieve(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let request: RetrieveRequest = parse(&body)?;
    blocking(engine, move |e| e.retrieve(&request)).await.map(ok)
}

async fn verify_ledger(State(engine): State<Arc<Engine>>) -> Result<Response, ApiError> {
    blocking(engine, |e| e.verify_ledger()).await.map(ok)
}

async fn history(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(engine, move |e| Ok(e.history(&id))).await.map(ok)
}

async fn run_eval(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let request: EvalRequest = parse(&body)?;
    let run = blocking(engine, move |e| e.start_eval(request)).await?;
    let status = if run.status == RunStatus::Running { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((status, Json(run)).into_response())
}

async fn eval_run(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    engine.eval_run(&id).map(ok)
}
