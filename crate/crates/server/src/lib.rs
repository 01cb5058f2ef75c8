//! HTTP/JSON front end for the detector toolkit.
//!
//! Every operation is a job: `POST` returns `{"id": ...}` immediately and the
//! work runs on the blocking pool; `GET /jobs/{id}` reports its state and,
//! once finished, the result or the error message.
//!
//! | Route | Body |
//! |---|---|
//! | `GET /health` | |
//! | `POST /generate` | [`GenerateRequest`] |
//! | `POST /train` | [`TrainRequest`] |
//! | `POST /evaluate` | [`EvaluateRequest`] |
//! | `POST /experiments` | [`ExperimentRequest`] |
//! | `GET /jobs` | |
//! | `GET /jobs/{id}` | |

pub mod ops;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pairdet_core::api::{
    ApiError, EvaluateRequest, ExperimentRequest, GenerateRequest, Health, JobCreated, JobState, JobStatus,
    TrainRequest,
};
use pairdet_core::harness::HarnessError;
use serde::Serialize;
use tokio::net::TcpListener;
use tracing::{error, info};

#[derive(Clone, Default)]
pub struct AppState {
    jobs: Arc<Mutex<BTreeMap<String, JobStatus>>>,
}

impl AppState {
    fn insert(&self, status: JobStatus) {
        self.jobs.lock().expect("job table lock").insert(status.id.clone(), status);
    }

    fn get(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().expect("job table lock").get(id).cloned()
    }

    fn list(&self) -> Vec<JobStatus> {
        self.jobs.lock().expect("job table lock").values().cloned().collect()
    }
}

fn spawn_job<T, F>(state: &AppState, kind: &str, work: F) -> JobCreated
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, HarnessError> + Send + 'static,
{
    let id = uuid::Uuid::new_v4().to_string();
    state.insert(JobStatus {
        id: id.clone(),
        kind: kind.to_string(),
        state: JobState::Running,
        result: None,
        error: None,
    });
    info!(%id, kind, "job started");
    let st = state.clone();
    let kind = kind.to_string();
    let job_id = id.clone();
    tokio::spawn(async move {
        let outcome = tokio::task::spawn_blocking(work).await;
        let (state, result, err) = match outcome {
            Ok(Ok(v)) => match serde_json::to_value(v) {
                Ok(v) => (JobState::Succeeded, Some(v), None),
                Err(e) => (JobState::Failed, None, Some(e.to_string())),
            },
            Ok(Err(e)) => (JobState::Failed, None, Some(e.to_string())),
            Err(e) => (JobState::Failed, None, Some(format!("job panicked: {e}"))),
        };
        match &err {
            Some(e) => error!(id = %job_id, kind, error = %e, "job failed"),
            None => info!(id = %job_id, kind, "job finished"),
        }
        st.insert(JobStatus {
            id: job_id,
            kind,
            state,
            result,
            error: err,
        });
    });
    JobCreated { id }
}

fn accepted(job: JobCreated) -> Response {
    (StatusCode::ACCEPTED, Json(job)).into_response()
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn generate(State(st): State<AppState>, Json(req): Json<GenerateRequest>) -> Response {
    accepted(spawn_job(&st, "generate", move || ops::generate(&req)))
}

async fn train(State(st): State<AppState>, Json(req): Json<TrainRequest>) -> Response {
    accepted(spawn_job(&st, "train", move || ops::train_run(&req)))
}

async fn evaluate(State(st): State<AppState>, Json(req): Json<EvaluateRequest>) -> Response {
    accepted(spawn_job(&st, "evaluate", move || ops::evaluate(&req)))
}

async fn experiment(State(st): State<AppState>, Json(req): Json<ExperimentRequest>) -> Response {
    let kind = format!("experiment.{}", req.kind);
    accepted(spawn_job(&st, &kind, move || ops::experiment(&req)))
}

async fn job(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.get(&id) {
        Some(s) => Json(s).into_response(),
        None => (
            StatusCode::NOT_FOUND,
            Json(ApiError {
                error: format!("no job {id}"),
            }),
        )
            .into_response(),
    }
}

async fn jobs(State(st): State<AppState>) -> Json<Vec<JobStatus>> {
    Json(st.list())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/generate", post(generate))
        .route("/train", post(train))
        .route("/evaluate", post(evaluate))
        .route("/experiments", post(experiment))
        .route("/jobs", get(jobs))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(AppState::default());
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            error!(error = %e, "server stopped");
        }
    });
    info!(%local, "listening");
    Ok(local)
}

/// Serves on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    info!(local = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::default())).await
}
