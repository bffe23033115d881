//! HTTP/WebSocket backend for the workbench. Sessions keep every dataset
//! version in memory; projections and alignment directives run as queued jobs
//! whose progress streams over `/sessions/{id}/events`.

mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mfwb_core::axis::{axis_layout, DEFAULT_BINS};
use mfwb_core::dataset::{knn_query, Manifest, ManifestPoint};
use mfwb_core::{load_dataset, AdapterConfig, AlignmentDirective, ConceptAxisSpec, Modality};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

pub use error::{ApiError, ApiResult};
pub use session::{JobEvent, JobKind, JobSpec, JobStatus, Phase, ProjectionRecord, ProjectionRequest, Session};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Manifests and vector files are resolved inside this directory.
    pub data_dir: PathBuf,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                config,
                sessions: RwLock::new(HashMap::new()),
                next: AtomicU64::new(1),
            }),
        }
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("UnknownSession", format!("unknown session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/projections", post(request_projection))
        .route("/sessions/{id}/projections/{ver}", get(get_projection))
        .route("/sessions/{id}/contours/{ver}", get(get_contours))
        .route("/sessions/{id}/axes", post(request_axes))
        .route("/sessions/{id}/directives", post(submit_directive))
        .route("/sessions/{id}/augment", post(augment))
        .route("/sessions/{id}/neighbors/{point_id}", get(neighbors))
        .route("/sessions/{id}/jobs/{job_id}", get(get_job))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, config).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, data_dir = %config.data_dir.display(), "serving");
    axum::serve(listener, router(AppState::new(config))).await
}

type JsonBody<T> = Result<Json<T>, axum::extract::rejection::JsonRejection>;

fn body<T>(b: JsonBody<T>) -> ApiResult<T> {
    Ok(b?.0)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CreateSession {
    manifest: String,
    #[serde(default)]
    snapshot: bool,
}

async fn create_session(State(app): State<AppState>, req: JsonBody<CreateSession>) -> ApiResult<Response> {
    let req = body(req)?;
    let data_dir = app.inner.config.data_dir.clone();
    let path = session::contained(&data_dir, &req.manifest)?;
    let dataset = tokio::task::spawn_blocking(move || load_dataset(&path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "JobPanicked", e.to_string()))??;
    let id = format!("s{}", app.inner.next.fetch_add(1, Ordering::Relaxed));
    let snapshot_dir = req.snapshot.then(|| data_dir.join("snapshots").join(&id));
    let (points, dimension) = (dataset.len(), dataset.dimension());
    let session = Session::start(id.clone(), req.manifest, dataset, data_dir, snapshot_dir);
    app.inner.sessions.write().unwrap().insert(id.clone(), session);
    tracing::info!(session = %id, points, "session created");
    let out = json!({ "sessionId": id, "version": 0, "points": points, "dimension": dimension });
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(app.session(&id)?.summary()))
}

fn accepted(job_id: String) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "jobId": job_id }))).into_response()
}

async fn request_projection(
    State(app): State<AppState>,
    Path(id): Path<String>,
    req: JsonBody<ProjectionRequest>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let req = body(req)?;
    if let Some(cfg) = &req.config {
        cfg.validate()?;
    }
    if let Some(v) = req.version {
        session.version(Some(v))?;
    }
    Ok(accepted(session.submit(JobSpec::Projection(req))))
}

async fn get_projection(State(app): State<AppState>, Path((id, ver)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    let record = app.session(&id)?.projection(ver)?;
    Ok(Json(serde_json::to_value(&*record).expect("projection serializes")))
}

async fn get_contours(State(app): State<AppState>, Path((id, ver)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    let record = app.session(&id)?.projection(ver)?;
    Ok(Json(json!({
        "version": record.version,
        "projector": record.projector,
        "sets": record.contours,
    })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AxesRequest {
    specs: Vec<ConceptAxisSpec>,
    #[serde(default)]
    cohort: Option<Vec<String>>,
    #[serde(default)]
    bins: Option<usize>,
    #[serde(default)]
    version: Option<usize>,
}

async fn request_axes(State(app): State<AppState>, Path(id): Path<String>, req: JsonBody<AxesRequest>) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let req = body(req)?;
    let version = session.version(req.version)?;
    let axes = axis_layout(&version.dataset, req.cohort.as_deref(), &req.specs, req.bins.unwrap_or(DEFAULT_BINS))?;
    Ok(Json(json!({ "version": version.index, "axes": axes })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct DirectiveRequest {
    directive: AlignmentDirective,
    #[serde(default)]
    config: Option<AdapterConfig>,
}

async fn submit_directive(
    State(app): State<AppState>,
    Path(id): Path<String>,
    req: JsonBody<DirectiveRequest>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let req = body(req)?;
    let spec = JobSpec::Directive {
        directive: req.directive,
        config: req.config.unwrap_or_default(),
    };
    Ok(accepted(session.submit(spec)))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AugmentRequest {
    points: Vec<ManifestPoint>,
    set_id: String,
}

async fn augment(State(app): State<AppState>, Path(id): Path<String>, req: JsonBody<AugmentRequest>) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let req = body(req)?;
    for p in &req.points {
        if let Some(r) = &p.vector_ref {
            session.resolve_path(&r.file)?;
        }
    }
    let fragment = Manifest {
        dimension: session.latest().dataset.dimension(),
        points: req.points,
        concepts: Vec::new(),
    };
    let points = fragment.resolve_points(session.data_dir())?;
    Ok(Json(session.augment(points, &req.set_id)?))
}

#[derive(Deserialize)]
struct NeighborQuery {
    k: Option<usize>,
    version: Option<usize>,
    modality: Option<String>,
}

async fn neighbors(
    State(app): State<AppState>,
    Path((id, point_id)): Path<(String, String)>,
    Query(q): Query<NeighborQuery>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let version = session.version(q.version)?;
    let modality = match q.modality.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None => None,
        Some("image") => Some(Modality::Image),
        Some("text") => Some(Modality::Text),
        Some(other) => return Err(ApiError::bad_request(format!("unknown modality `{other}`"))),
    };
    let ds = &version.dataset;
    let hits = knn_query(ds, &point_id, q.k.unwrap_or(10), modality)?;
    let items: Vec<Value> = hits
        .iter()
        .map(|n| {
            let p = ds.point(n.id).expect("neighbor ids come from the dataset");
            json!({
                "id": n.id,
                "distance": n.distance,
                "assetUri": p.asset_uri,
                "label": p.label,
                "setId": p.set_id,
                "modality": p.modality,
            })
        })
        .collect();
    Ok(Json(json!({ "pointId": point_id, "version": version.index, "neighbors": items })))
}

async fn get_job(State(app): State<AppState>, Path((id, job_id)): Path<(String, String)>) -> ApiResult<Json<JobStatus>> {
    Ok(Json(app.session(&id)?.job(&job_id)?))
}

async fn events(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let session = app.session(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, session)))
}

async fn stream_events(mut socket: WebSocket, session: Arc<Session>) {
    let mut rx = session.subscribe();
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let text = serde_json::to_string(&ev).expect("event serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    tracing::warn!(session = %session.id, skipped = n, "event subscriber lagged");
                }
                Err(RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
