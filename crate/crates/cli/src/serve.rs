//! HTTP JSON API for the negative review workflow.
//!
//! | Method | Path | Body / query | Response |
//! |---|---|---|---|
//! | GET | `/batches/next?level=obj` | | `NextBatch` (`status` = `tasks` or `done`) |
//! | POST | `/labels` | `{result_id, label, reviewer_id, override?}` | the stored `labels.v1` record |
//! | GET | `/calibration/status` | | per-level progress and θ |
//! | POST | `/survey/export` | `{seed?}` | `{version_a, version_b}` |
//!
//! Errors are `{"error": kind, "message": ..}` with 400 for bad input,
//! 404 for unknown tasks, and 409 for `already_labeled`,
//! `batch_incomplete` and `orphan_pair`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use finer_core::jsonl::save_json;
use finer_core::mcq::{survey_split, Mcq, McqError};
use finer_core::review::{ReviewError, ReviewSession};
use finer_core::types::{EntityKind, HumanLabel};
use finer_core::Seed;
use serde::Deserialize;
use serde_json::{json, Value};

pub struct AppState {
    pub session: Mutex<ReviewSession>,
    pub mcqs: Vec<Mcq>,
    pub seed: Seed,
    /// Where survey versions are written, if anywhere.
    pub survey_dir: Option<PathBuf>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/batches/next", get(next_batch))
        .route("/labels", post(submit_label))
        .route("/calibration/status", get(calibration_status))
        .route("/survey/export", post(survey_export))
        .with_state(state)
}

struct ApiError(StatusCode, &'static str, String, Value);

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError(status, kind, message.into(), Value::Null)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.1, "message": self.2});
        if !self.3.is_null() {
            body["details"] = self.3;
        }
        (self.0, Json(body)).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let msg = e.to_string();
        match e {
            ReviewError::BatchIncomplete { kind, batch_index, result_ids } => ApiError(
                StatusCode::CONFLICT,
                "batch_incomplete",
                msg,
                json!({"kind": kind, "batch_index": batch_index, "result_ids": result_ids}),
            ),
            ReviewError::UnknownTask(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_task", msg),
            ReviewError::AlreadyLabeled(_) => ApiError::new(StatusCode::CONFLICT, "already_labeled", msg),
            ReviewError::Labels(_) | ReviewError::Io(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", msg),
        }
    }
}

#[derive(Deserialize)]
struct LevelQuery {
    level: String,
}

async fn next_batch(State(st): State<Arc<AppState>>, Query(q): Query<LevelQuery>) -> Result<Json<Value>, ApiError> {
    let kind = EntityKind::parse_short(&q.level)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_level", format!("unknown level {:?}", q.level)))?;
    let session = st.session.lock().expect("review session lock");
    let batch = session.next_batch(kind)?;
    Ok(Json(serde_json::to_value(batch).expect("batch serializes")))
}

#[derive(Deserialize)]
struct LabelBody {
    result_id: String,
    label: HumanLabel,
    reviewer_id: String,
    #[serde(default, rename = "override")]
    overwrite: bool,
}

async fn submit_label(State(st): State<Arc<AppState>>, Json(b): Json<LabelBody>) -> Result<(StatusCode, Json<Value>), ApiError> {
    if b.reviewer_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "missing_reviewer", "reviewer_id is required"));
    }
    let mut session = st.session.lock().expect("review session lock");
    let rec = session.submit_label(&b.result_id, b.label, &b.reviewer_id, b.overwrite)?;
    let mut v = serde_json::to_value(&rec).expect("label serializes");
    v["schema"] = json!("labels.v1");
    Ok((StatusCode::CREATED, Json(v)))
}

async fn calibration_status(State(st): State<Arc<AppState>>) -> Json<Value> {
    let session = st.session.lock().expect("review session lock");
    Json(json!({"levels": session.status(), "labels": session.labels().len()}))
}

#[derive(Deserialize, Default)]
struct SurveyBody {
    #[serde(default)]
    seed: Option<u64>,
}

// An empty body means "use the server seed", whatever the content type says.
async fn survey_export(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    if st.mcqs.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_mcqs", "server was started without --mcq"));
    }
    let body: SurveyBody = if body.iter().all(u8::is_ascii_whitespace) {
        SurveyBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_body", e.to_string()))?
    };
    let seed = body.seed.map(Seed::new).unwrap_or(st.seed);
    let export = survey_split(&st.mcqs, seed).map_err(|e| match e {
        McqError::OrphanPair { .. } => ApiError::new(StatusCode::CONFLICT, "orphan_pair", e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "survey", other.to_string()),
    })?;
    if let Some(dir) = &st.survey_dir {
        for (name, items) in [("survey_version_a.json", &export.version_a), ("survey_version_b.json", &export.version_b)] {
            save_json(items, dir.join(name)).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?;
        }
    }
    Ok(Json(serde_json::to_value(&export).expect("survey serializes")))
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review API listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
