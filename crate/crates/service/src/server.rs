//! Routes and the bounded worker pool.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::api::{EditRequestBody, GenerateRequest, RefineRequest};
use crate::engine::{Engine, Task};
use crate::error::ServiceError;
use crate::jobs::{JobState, JobStore};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub jobs: Arc<JobStore>,
    permits: Arc<Semaphore>,
    workers: usize,
}

impl AppState {
    pub fn new(engine: Engine, workers: usize) -> Self {
        let workers = workers.max(1);
        Self { engine: Arc::new(engine), jobs: Arc::new(JobStore::new()), permits: Arc::new(Semaphore::new(workers)), workers }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Queues `task` and returns its job id; a worker slot runs it on the blocking pool.
    pub fn submit(&self, task: Task, request: serde_json::Value) -> String {
        let id = self.jobs.create(task.kind(), request);
        let (jobs, engine, permits, job_id) = (self.jobs.clone(), self.engine.clone(), self.permits.clone(), id.clone());
        tokio::spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else { return };
            jobs.start(&job_id);
            let outcome = tokio::task::spawn_blocking(move || engine.run(&task)).await;
            match outcome {
                Ok(Ok(v)) => jobs.finish(&job_id, v),
                Ok(Err(e)) => jobs.fail(&job_id, e.body()),
                Err(e) => jobs.fail(&job_id, ServiceError::Internal(format!("worker panicked: {e}")).body()),
            };
        });
        id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub id: String,
    pub state: JobState,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/generate", post(post_generate))
        .route("/v1/edit", post(post_edit))
        .route("/v1/refine", post(post_refine))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/health", get(health))
        .with_state(state)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<(T, serde_json::Value), ServiceError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ServiceError::bad("bad_json", e.to_string()))?;
    let req = serde_json::from_value(value.clone()).map_err(|e| ServiceError::bad("bad_request", e.to_string()))?;
    Ok((req, value))
}

fn accepted(id: String) -> Response {
    (StatusCode::ACCEPTED, Json(Submitted { id, state: JobState::Queued })).into_response()
}

/// Images are dropped from the stored request echo.
fn redact(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = v.as_object_mut() {
        for key in ["image", "mask"] {
            if let Some(field) = obj.get_mut(key) {
                if field.is_string() {
                    *field = serde_json::Value::String("<png>".into());
                }
            }
        }
    }
    v
}

async fn post_generate(State(s): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let (req, raw): (GenerateRequest, _) = parse(&body)?;
    let task = s.engine.prepare_generate(&req)?;
    Ok(accepted(s.submit(task, raw)))
}

async fn post_edit(State(s): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let (req, raw): (EditRequestBody, _) = parse(&body)?;
    let task = s.engine.prepare_edit(&req)?;
    Ok(accepted(s.submit(task, redact(raw))))
}

async fn post_refine(State(s): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let (req, raw): (RefineRequest, _) = parse(&body)?;
    let task = s.engine.prepare_refine(&req)?;
    Ok(accepted(s.submit(task, redact(raw))))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let job = s.jobs.get(&id).ok_or(ServiceError::NotFound(id))?;
    Ok(Json(job).into_response())
}

async fn health(State(s): State<AppState>) -> Response {
    Json(s.engine.health(s.workers)).into_response()
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
