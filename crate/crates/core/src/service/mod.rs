//! JSON API over a run directory for the expert review UI.
//!
//! Reads open the run fresh from disk; mutations for one run are
//! serialised by a per-run lock and executed on the blocking pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Runner, SelectRequest, SelectionSource};
use crate::store::{RunRecord, StageFlags, Store};

#[derive(Clone)]
pub struct AppState {
    store: Store,
    locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        Self {
            store,
            locks: Arc::default(),
        }
    }

    fn lock_for(&self, run_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(run_id.to_string()).or_default().clone()
    }
}

/// Error body: `{"error": "..."}` with a status derived from the error kind.
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::StageIncomplete(_) | Error::InvalidState(_) => StatusCode::CONFLICT,
        Error::InvalidInput(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
        Error::Provider(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Runs `f` on the blocking pool, holding the run's lock when `exclusive`.
async fn with_runner<T, F>(state: AppState, run_id: String, exclusive: bool, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Runner) -> Result<T> + Send + 'static,
{
    let lock = exclusive.then(|| state.lock_for(&run_id));
    let out = tokio::task::spawn_blocking(move || {
        let _guard = lock.as_ref().map(|l| l.lock().unwrap_or_else(|e| e.into_inner()));
        let mut runner = Runner::open(state.store.clone(), &run_id)?;
        f(&mut runner)
    })
    .await
    .map_err(|e| Error::InvalidState(format!("worker failed: {e}")))??;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub flags: StageFlags,
}

async fn list_runs(State(state): State<AppState>) -> ApiResult<Vec<RunSummary>> {
    let store = state.store.clone();
    let runs = tokio::task::spawn_blocking(move || store.list_runs())
        .await
        .map_err(|e| Error::InvalidState(format!("worker failed: {e}")))??;
    Ok(Json(
        runs.into_iter()
            .map(|r| RunSummary {
                run_id: r.run_id,
                created_ms: r.created_ms,
                updated_ms: r.updated_ms,
                flags: r.flags,
            })
            .collect(),
    ))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<RunRecord> {
    with_runner(state, id, false, |r| Ok(r.record().clone())).await
}

async fn get_clusters(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    with_runner(state, id, false, |r| {
        let report = r.cluster_report()?;
        let selection = if r.record().flags.selected {
            Some(r.selection()?)
        } else {
            None
        };
        Ok(serde_json::json!({
            "k": report.selection.scores.len(),
            "stats": report.stats,
            "auto_selection": report.selection,
            "representatives": report.representatives,
            "selection": selection,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct PrototypeQuery {
    cluster: usize,
    limit: Option<usize>,
}

async fn get_prototypes(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PrototypeQuery>,
) -> ApiResult<serde_json::Value> {
    with_runner(state, id, false, move |r| {
        let views = r.prototype_views(q.cluster, q.limit.unwrap_or(usize::MAX))?;
        Ok(serde_json::json!({ "cluster": q.cluster, "prototypes": views }))
    })
    .await
}

async fn get_concepts(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    with_runner(state, id, false, |r| {
        if !r.record().flags.concepts {
            return Err(Error::StageIncomplete("concepts".into()));
        }
        Ok(serde_json::to_value(r.concepts()?)?)
    })
    .await
}

async fn post_concepts(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    with_runner(state, id, true, |r| Ok(serde_json::to_value(r.concepts()?)?)).await
}

#[derive(Deserialize)]
struct SelectBody {
    cluster: Option<usize>,
    source: SelectionSource,
}

async fn post_select(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<SelectBody>,
) -> ApiResult<serde_json::Value> {
    let request = match (body.source, body.cluster) {
        (SelectionSource::Expert, Some(c)) => SelectRequest::Expert(c),
        (SelectionSource::Expert, None) => {
            return Err(Error::InvalidInput("an expert selection needs a cluster".into()).into());
        }
        (SelectionSource::Auto, _) => SelectRequest::Auto,
    };
    with_runner(state, id, true, move |r| Ok(serde_json::to_value(r.select(request)?)?)).await
}

async fn post_mitigate(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    with_runner(state, id, true, |r| Ok(serde_json::to_value(r.mitigate()?.metrics)?)).await
}

async fn get_metrics(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    with_runner(state, id, false, |r| Ok(serde_json::to_value(r.metrics()?)?)).await
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/clusters", get(get_clusters))
        .route("/runs/{id}/prototypes", get(get_prototypes))
        .route("/runs/{id}/concepts", get(get_concepts).post(post_concepts))
        .route("/runs/{id}/select", post(post_select))
        .route("/runs/{id}/mitigate", post(post_mitigate))
        .route("/runs/{id}/metrics", get(get_metrics))
        .with_state(AppState::new(store))
}

/// Blocks serving the API on `addr`.
pub fn serve(store: Store, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(store)).await?;
        Ok(())
    })
}
