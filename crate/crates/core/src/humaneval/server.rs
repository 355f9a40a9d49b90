//! HTTP API for running studies.
//!
//! * `POST /studies` (admin) creates a study.
//! * `GET /studies/{id}/tasks?rater=R` returns R's next unjudged task with
//!   the two generations labelled A and B.
//! * `POST /studies/{id}/judgments` records one verdict.
//! * `GET /studies/{id}/report` (admin) returns win matrices, kappas,
//!   completion counts and the unblinded side mapping.
//!
//! Admin routes expect `Authorization: Bearer <token>`. Every error is a
//! JSON body `{code, message}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{create_study, study_report, Judgment, JudgmentStore, Metric, Sample, Study, Verdict};
use crate::error::{Error, Result};

struct Entry {
    study: Study,
    store: JudgmentStore,
}

/// Shared server state. Studies and their event logs live under
/// `data_dir` when one is given, as `{id}.study.json` and
/// `{id}.events.jsonl`.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<RwLock<HashMap<String, Entry>>>,
    admin_token: Arc<String>,
    data_dir: Option<Arc<PathBuf>>,
    drop_ties: bool,
}

impl AppState {
    pub fn new(admin_token: &str, data_dir: Option<PathBuf>, drop_ties: bool) -> Result<Self> {
        let mut studies = HashMap::new();
        if let Some(dir) = &data_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for item in listing {
                let path = item.map_err(|e| Error::io(dir, e))?.path();
                let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
                if let Some(id) = name.strip_suffix(".study.json") {
                    let study = Study::load(&path)?;
                    let store = JudgmentStore::open(&dir.join(format!("{id}.events.jsonl")))?;
                    info!("loaded study {id} with {} judgments", store.len());
                    studies.insert(study.id.clone(), Entry { study, store });
                }
            }
        }
        Ok(AppState {
            inner: Arc::new(RwLock::new(studies)),
            admin_token: Arc::new(admin_token.to_string()),
            data_dir: data_dir.map(Arc::new),
            drop_ties,
        })
    }
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_study", format!("no study {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn require_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let given = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(state.admin_token.as_str()) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "admin token required"));
    }
    Ok(())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "schema", e.to_string()))
}

fn study_error(e: Error) -> ApiError {
    let msg = e.to_string();
    let code = if msg.contains("rater not in study") {
        "unknown_rater"
    } else if msg.contains("task") {
        "unknown_task"
    } else {
        "invalid"
    };
    ApiError::new(StatusCode::BAD_REQUEST, code, msg)
}

#[derive(Deserialize)]
struct CreateRequest {
    id: String,
    systems: Vec<String>,
    samples: Vec<Sample>,
    sample_count: usize,
    raters: Vec<String>,
    #[serde(default)]
    seed: u64,
}

async fn create(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    require_admin(&state, &headers)?;
    let req: CreateRequest = parse_body(&body)?;
    let study = create_study(&req.id, &req.systems, &req.samples, req.sample_count, &req.raters, req.seed)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid", e.to_string()))?;
    let mut studies = state.inner.write().unwrap();
    if studies.contains_key(&study.id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "exists", format!("study {} exists", study.id)));
    }
    let store = match &state.data_dir {
        Some(dir) => {
            study
                .save(&dir.join(format!("{}.study.json", study.id)))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?;
            JudgmentStore::open(&dir.join(format!("{}.events.jsonl", study.id)))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?
        }
        None => JudgmentStore::in_memory(),
    };
    let out = json!({"study_id": study.id, "tasks": study.tasks.len()});
    studies.insert(study.id.clone(), Entry { study, store });
    Ok((StatusCode::CREATED, Json(out)))
}

/// What a rater sees: no system names.
#[derive(Serialize)]
struct TaskView {
    task_id: usize,
    prompt: String,
    a: String,
    b: String,
    metrics: Vec<Metric>,
    remaining: usize,
}

async fn next_task(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let rater = q
        .get("rater")
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "schema", "missing rater query parameter"))?;
    let studies = state.inner.read().unwrap();
    let entry = studies.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let study = &entry.study;
    if !study.raters.contains(rater) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "unknown_rater", "rater not in study"));
    }
    let open: Vec<_> = study
        .tasks
        .iter()
        .filter(|t| study.metrics.iter().any(|&m| !entry.store.has(t.task_id, rater, m)))
        .collect();
    let Some(task) = open.first() else {
        return Ok(Json(json!({"done": true})));
    };
    let sample = study.sample(&task.sample_id).expect("task sample");
    let view = TaskView {
        task_id: task.task_id,
        prompt: sample.prompt.clone(),
        a: sample.generations[&task.left_system].clone(),
        b: sample.generations[&task.right_system].clone(),
        metrics: study.metrics.clone(),
        remaining: open.len(),
    };
    Ok(Json(serde_json::to_value(view).unwrap()))
}

#[derive(Deserialize)]
struct JudgmentRequest {
    task_id: usize,
    rater_id: String,
    metric: Metric,
    verdict: Verdict,
}

async fn judge(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: JudgmentRequest = parse_body(&body)?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let mut studies = state.inner.write().unwrap();
    let entry = studies.get_mut(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let j = Judgment {
        task_id: req.task_id,
        rater_id: req.rater_id,
        metric: req.metric,
        verdict: req.verdict,
        timestamp,
    };
    entry.store.record(&entry.study, j).map_err(study_error)?;
    Ok(Json(json!({"ok": true})))
}

async fn report(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let studies = state.inner.read().unwrap();
    let entry = studies.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let r = study_report(&entry.study, &entry.store.judgments(), state.drop_ties);
    Ok(Json(serde_json::to_value(r).unwrap()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", post(create))
        .route("/studies/{id}/tasks", get(next_task))
        .route("/studies/{id}/judgments", post(judge))
        .route("/studies/{id}/report", get(report))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Invalid(format!("cannot bind {addr}: {e}")))?;
    info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Invalid(format!("server: {e}")))
}
