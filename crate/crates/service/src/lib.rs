//! HTTP sessions over fitted reduced models.
//!
//! ```text
//! POST /sessions                  fit a model and solve the baseline loop
//! GET  /sessions/{id}             session summary and latest metrics
//! POST /sessions/{id}/edits       apply one local edit
//! GET  /sessions/{id}/frames      latest loop as a binary frame stream
//! GET  /health
//! ```
//!
//! Edits on one session are serialized through a fair async mutex, so they
//! apply in arrival order. Frame reads use an immutable snapshot of the latest
//! loop and never wait on a running solve.

pub mod error;
pub mod frames;

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use koopcycle::control_basis::LocalBasisDescriptor;
use koopcycle::datagen::DatasetClass;
use koopcycle::interactive::{EditMetrics, EditRequest, EditSession, EditWeights};
use koopcycle::koopman::RankSelection;
use koopcycle::trajectory::{FieldBlock, Trajectory};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;
use uuid::Uuid;

pub use error::{ApiError, ApiResult};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory that `trajectory` references in session requests resolve against.
    pub model_dir: Option<PathBuf>,
}

/// Immutable view of a session's latest loop.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    /// `T + 1` frames, closing frame last.
    pub cycle: Trajectory,
    pub metrics: EditMetrics,
}

pub struct SessionHandle {
    pub summary: SessionSummary,
    editor: Arc<Mutex<EditSession>>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl SessionHandle {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

#[derive(Default)]
pub struct AppState {
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<Uuid, Arc<SessionHandle>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: RwLock::default(),
        })
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        let uuid = Uuid::parse_str(id).map_err(|_| ApiError::not_found(format!("no session `{id}`")))?;
        self.sessions
            .read()
            .expect("session table lock")
            .get(&uuid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session table lock").len()
    }

    /// Writes every session's latest loop to `<dir>/<id>.traj`.
    pub fn snapshot_to(&self, dir: &Path) -> koopcycle::Result<usize> {
        let sessions: Vec<(Uuid, Arc<SessionHandle>)> = self
            .sessions
            .read()
            .expect("session table lock")
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        std::fs::create_dir_all(dir).map_err(|e| koopcycle::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (id, handle) in &sessions {
            handle.snapshot().cycle.save(dir.join(format!("{id}.traj")))?;
        }
        Ok(sessions.len())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edits", post(apply_edit))
        .route("/sessions/{id}/frames", get(get_frames))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": state.session_count() }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    /// Builtin generator: `nbody`, `sheet` or `water`.
    pub dataset: Option<String>,
    /// `.traj` file relative to the service model directory.
    pub trajectory: Option<String>,
    pub rank: Option<usize>,
    pub harmonics: Option<usize>,
    #[serde(default)]
    pub include_constant: bool,
    pub weights: Option<EditWeights>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub closure_residual: f64,
    pub fidelity_cost: f64,
    pub coefficient_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub source: String,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    /// Loop period `T`.
    pub period: usize,
    pub dt: f64,
    pub blocks: Vec<FieldBlock>,
    pub spectral_radius: f64,
    pub fit_seconds: f64,
    pub baseline: BaselineSummary,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Resolves a trajectory reference without letting it escape the model directory.
fn resolve_reference(config: &ServiceConfig, reference: &str) -> ApiResult<PathBuf> {
    let dir = config
        .model_dir
        .as_ref()
        .ok_or_else(|| ApiError::bad_request("trajectory references need a service model directory"))?;
    let rel = Path::new(reference);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::bad_request(format!(
            "trajectory reference `{reference}` must be a plain relative path"
        )));
    }
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(ApiError::bad_request(format!("trajectory `{reference}` not found")));
    }
    Ok(path)
}

fn load_source(state: &AppState, req: &CreateSessionRequest) -> ApiResult<(String, Trajectory, DatasetClass)> {
    match (&req.dataset, &req.trajectory) {
        (Some(name), None) => {
            let class: DatasetClass = name
                .parse()
                .map_err(|e: koopcycle::Error| ApiError::bad_request(e.to_string()))?;
            let traj = class.generate_default()?;
            Ok((class.to_string(), traj, class))
        }
        (None, Some(reference)) => {
            let path = resolve_reference(&state.config, reference)?;
            let traj = Trajectory::load(&path).map_err(ApiError::from_load)?;
            let class = DatasetClass::infer(&traj.layout);
            Ok((reference.clone(), traj, class))
        }
        _ => Err(ApiError::bad_request(
            "exactly one of `dataset` or `trajectory` is required",
        )),
    }
}

fn build_session(state: &AppState, req: CreateSessionRequest) -> ApiResult<(EditSession, String)> {
    if req.rank == Some(0) || req.harmonics == Some(0) {
        return Err(ApiError::bad_request("rank and harmonics must be positive"));
    }
    let weights = req.weights.unwrap_or_default();
    weights.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let (source, traj, class) = load_source(state, &req)?;
    let rank = req.rank.unwrap_or_else(|| class.default_rank());
    let harmonics = req.harmonics.unwrap_or_else(|| class.default_harmonics());
    let fit_frames = traj.split().fit_frames;
    if 2 * harmonics >= fit_frames {
        return Err(ApiError::bad_request(format!(
            "{harmonics} harmonics need more than {} fit frames, have {fit_frames}",
            2 * harmonics
        )));
    }
    let session = EditSession::fit(
        &traj,
        RankSelection::Fixed(rank),
        harmonics,
        req.include_constant,
        weights,
    )
    .map_err(|e| match ApiError::from(e) {
        err if err.status == StatusCode::BAD_REQUEST => ApiError::unprocessable(err.message),
        err => err,
    })?;
    Ok((session, source))
}

fn snapshot_of(session: &EditSession) -> ApiResult<Snapshot> {
    Ok(Snapshot {
        version: session.version,
        cycle: session.latest_trajectory()?,
        metrics: session.latest.metrics.clone(),
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let req: CreateSessionRequest = parse_json(&body)?;
    let worker = state.clone();
    let (session, source) = tokio::task::spawn_blocking(move || build_session(&worker, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;

    let id = Uuid::new_v4();
    let base = &session.baseline.metrics;
    let summary = SessionSummary {
        session_id: id.to_string(),
        source,
        n: session.model.dim(),
        r: session.model.rank(),
        m: session.basis.m(),
        period: session.period(),
        dt: session.dt,
        blocks: session.layout.blocks.clone(),
        spectral_radius: session.model.spectral_radius,
        fit_seconds: session.fit_seconds,
        baseline: BaselineSummary {
            closure_residual: base.closure_residual,
            fidelity_cost: base.fidelity_cost,
            coefficient_cost: base.coefficient_cost,
        },
    };
    let handle = SessionHandle {
        summary: summary.clone(),
        snapshot: RwLock::new(Arc::new(snapshot_of(&session)?)),
        editor: Arc::new(Mutex::new(session)),
    };
    state
        .sessions
        .write()
        .expect("session table lock")
        .insert(id, Arc::new(handle));
    log::info!("session {id}: {} r={} T={}", summary.source, summary.r, summary.period);
    Ok((StatusCode::CREATED, Json(summary)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStatus {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub version: u64,
    pub metrics: EditMetrics,
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionStatus>> {
    let handle = state.session(&id)?;
    let snap = handle.snapshot();
    Ok(Json(SessionStatus {
        summary: handle.summary.clone(),
        version: snap.version,
        metrics: snap.metrics.clone(),
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct EditBody {
    #[serde(flatten)]
    pub edit: EditRequest,
    /// Reject the edit with 409 unless the session is at this version.
    #[serde(default)]
    pub base_version: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub version: u64,
    pub closure_residual: f64,
    /// Frame (1-based) where the edited coefficient peaks.
    pub peak_frame: usize,
    /// Max-norm distance of the reduced loop from the session baseline.
    pub baseline_deviation: f64,
    pub local_basis: LocalBasisDescriptor,
    pub metrics: EditMetrics,
}

async fn apply_edit(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<EditResponse>> {
    let handle = state.session(&id)?;
    let body: EditBody = parse_json(&body)?;
    let guard = handle.editor.clone().lock_owned().await;
    let (response, snapshot) = tokio::task::spawn_blocking(move || {
        let mut session = guard;
        if let Some(expected) = body.base_version {
            if expected != session.version {
                return Err(ApiError::conflict(format!(
                    "session is at version {}, edit expects {expected}",
                    session.version
                )));
            }
        }
        session.apply(&body.edit)?;
        let sol = &session.latest;
        let peak_frame = sol.selected_series.argmax().0 + 1;
        let response = EditResponse {
            version: session.version,
            closure_residual: sol.metrics.closure_residual,
            peak_frame,
            baseline_deviation: (&sol.reduced_cycle - &session.baseline.reduced_cycle).amax(),
            local_basis: session
                .latest_descriptor()
                .cloned()
                .expect("applied edit records its basis"),
            metrics: sol.metrics.clone(),
        };
        let snapshot = snapshot_of(&session)?;
        Ok((response, snapshot))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    *handle.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    Ok(Json(response))
}

#[derive(Debug, Clone, Deserialize)]
pub struct FrameQuery {
    pub stride: Option<usize>,
    pub block: Option<String>,
    /// Answer 409 unless the latest loop has this version.
    pub version: Option<u64>,
    #[serde(default)]
    pub include_closing: bool,
}

async fn get_frames(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<FrameQuery>,
) -> ApiResult<Response> {
    let handle = state.session(&id)?;
    let snap = handle.snapshot();
    if let Some(v) = query.version {
        if v != snap.version {
            return Err(ApiError::conflict(format!(
                "requested version {v}, latest is {}",
                snap.version
            )));
        }
    }
    let block = query
        .block
        .clone()
        .unwrap_or_else(|| frames::default_block(&snap.cycle).to_string());
    let bytes = frames::encode(
        &snap.cycle,
        snap.version,
        &block,
        query.stride.unwrap_or(1),
        query.include_closing,
    )?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        bytes,
    )
        .into_response())
}

/// Serves until ctrl-c, then optionally writes session snapshots.
pub async fn serve(
    config: ServiceConfig,
    addr: std::net::SocketAddr,
    snapshot_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let state = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(dir) = snapshot_dir {
        match state.snapshot_to(&dir) {
            Ok(n) => log::info!("wrote {n} session snapshots to {}", dir.display()),
            Err(e) => log::error!("snapshot failed: {e}"),
        }
    }
    Ok(())
}
