//! Session state: dataset versions, projections per version and the job queue.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use mfwb_core::alignment::{apply_adapter, build_triplets, train_adapter_with, verify_alignment};
use mfwb_core::density::{set_contours, DEFAULT_LEVEL_FRACTIONS};
use mfwb_core::mfm::{forward, train_mfm_with, LossParts};
use mfwb_core::projectors::project;
use mfwb_core::quality::{evaluate_layout, RoundMetrics, DEFAULT_K};
use mfwb_core::{
    save_dataset, AdapterConfig, AdapterModel, AlignmentDirective, ContourSet, EmbeddingDataset, EmbeddingPoint,
    KdeOptions, MfmConfig, ProjectionLayout, ProjectionModel, ProjectorKind,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};

use crate::error::{ApiError, ApiResult};

/// Progress events per job are thinned to about this many.
const PROGRESS_EVENTS: usize = 100;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum VersionOrigin {
    Loaded,
    Directive { job_id: String },
    Augment { set_id: String, added: usize },
}

#[derive(Debug, Clone)]
pub struct Version {
    pub index: usize,
    pub parent: Option<usize>,
    pub origin: VersionOrigin,
    pub dataset: Arc<EmbeddingDataset>,
    /// Adapter that produced this version from its parent.
    pub adapter: Option<Arc<AdapterModel>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionSource {
    /// The projector ran on this version.
    Trained,
    /// An earlier MFM model was applied to this version's embeddings.
    Forward,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectionRecord {
    pub version: usize,
    pub projector: ProjectorKind,
    pub seed: u64,
    pub source: ProjectionSource,
    pub layout: ProjectionLayout,
    pub contours: Vec<ContourSet>,
    pub quality: Option<RoundMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossParts>,
    #[serde(skip)]
    pub model: Option<Arc<ProjectionModel>>,
    #[serde(skip)]
    pub config: MfmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Queued,
    Running,
    Progress,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Projection,
    Directive,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobEvent {
    pub job_id: String,
    /// Session-wide event counter.
    pub seq: u64,
    pub phase: Phase,
    pub kind: JobKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub phase: Phase,
    pub events: Vec<JobEvent>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectionRequest {
    pub projector: ProjectorKind,
    #[serde(default)]
    pub config: Option<MfmConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub version: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum JobSpec {
    Projection(ProjectionRequest),
    Directive {
        directive: AlignmentDirective,
        config: AdapterConfig,
    },
}

impl JobSpec {
    fn kind(&self) -> JobKind {
        match self {
            JobSpec::Projection(_) => JobKind::Projection,
            JobSpec::Directive { .. } => JobKind::Directive,
        }
    }
}

pub struct Job {
    pub id: String,
    pub spec: JobSpec,
}

#[derive(Default)]
struct State {
    versions: Vec<Version>,
    projections: BTreeMap<usize, Arc<ProjectionRecord>>,
}

#[derive(Default)]
struct JobTable {
    next: u64,
    seq: u64,
    jobs: BTreeMap<String, JobStatus>,
}

pub struct Session {
    pub id: String,
    pub manifest: String,
    data_dir: PathBuf,
    snapshot_dir: Option<PathBuf>,
    state: RwLock<State>,
    jobs: Mutex<JobTable>,
    events: broadcast::Sender<JobEvent>,
    queue: mpsc::UnboundedSender<Job>,
}

/// Rejects absolute paths and `..` so requests stay inside the data directory.
pub fn contained(data_dir: &Path, relative: &str) -> ApiResult<PathBuf> {
    let p = Path::new(relative);
    if relative.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(ApiError::bad_request(format!("path `{relative}` must be relative to the data directory")));
    }
    Ok(data_dir.join(p))
}

fn unknown_version(v: usize) -> ApiError {
    ApiError::not_found("UnknownVersion", format!("unknown version {v}"))
}

impl Session {
    /// Builds the session and starts its worker on the current runtime.
    pub fn start(
        id: String,
        manifest: String,
        dataset: EmbeddingDataset,
        data_dir: PathBuf,
        snapshot_dir: Option<PathBuf>,
    ) -> Arc<Session> {
        let (events, _) = broadcast::channel(1024);
        let (queue, rx) = mpsc::unbounded_channel();
        let session = Arc::new(Session {
            id,
            manifest,
            data_dir,
            snapshot_dir,
            state: RwLock::new(State::default()),
            jobs: Mutex::new(JobTable::default()),
            events,
            queue,
        });
        session.push_version(Version {
            index: 0,
            parent: None,
            origin: VersionOrigin::Loaded,
            dataset: Arc::new(dataset),
            adapter: None,
        });
        tokio::spawn(worker(session.clone(), rx));
        session
    }

    fn push_version(&self, version: Version) {
        self.snapshot(&version);
        self.state.write().unwrap().versions.push(version);
    }

    fn snapshot(&self, version: &Version) {
        let Some(dir) = &self.snapshot_dir else { return };
        let path = dir.join(format!("v{}.json", version.index));
        let res = std::fs::create_dir_all(dir)
            .map_err(|e| e.to_string())
            .and_then(|_| save_dataset(&version.dataset, &path).map_err(|e| e.to_string()))
            .and_then(|_| match &version.adapter {
                Some(a) => a.save(&dir.join(format!("v{}-adapter.json", version.index))).map_err(|e| e.to_string()),
                None => Ok(()),
            });
        if let Err(e) = res {
            tracing::warn!(session = %self.id, version = version.index, error = %e, "snapshot failed");
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<JobEvent> {
        self.events.subscribe()
    }

    pub fn latest(&self) -> Version {
        self.state.read().unwrap().versions.last().cloned().expect("a session always has v0")
    }

    pub fn version(&self, v: Option<usize>) -> ApiResult<Version> {
        match v {
            None => Ok(self.latest()),
            Some(v) => self.state.read().unwrap().versions.get(v).cloned().ok_or_else(|| unknown_version(v)),
        }
    }

    pub fn projection(&self, v: usize) -> ApiResult<Arc<ProjectionRecord>> {
        let state = self.state.read().unwrap();
        if v >= state.versions.len() {
            return Err(unknown_version(v));
        }
        state
            .projections
            .get(&v)
            .cloned()
            .ok_or_else(|| ApiError::not_found("NoProjection", format!("version {v} has not been projected")))
    }

    pub fn job(&self, id: &str) -> ApiResult<JobStatus> {
        self.jobs
            .lock()
            .unwrap()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("UnknownJob", format!("unknown job `{id}`")))
    }

    pub fn summary(&self) -> Value {
        let state = self.state.read().unwrap();
        let versions: Vec<Value> = state
            .versions
            .iter()
            .map(|v| {
                json!({
                    "version": v.index,
                    "parent": v.parent,
                    "origin": v.origin,
                    "points": v.dataset.len(),
                    "hasAdapter": v.adapter.is_some(),
                })
            })
            .collect();
        let projections: Vec<Value> = state
            .projections
            .values()
            .map(|p| json!({ "version": p.version, "projector": p.projector, "source": p.source }))
            .collect();
        let jobs: Vec<Value> = self
            .jobs
            .lock()
            .unwrap()
            .jobs
            .values()
            .map(|j| json!({ "jobId": j.job_id, "kind": j.kind, "phase": j.phase }))
            .collect();
        let ds = &state.versions[state.versions.len() - 1].dataset;
        json!({
            "sessionId": self.id,
            "manifest": self.manifest,
            "latestVersion": state.versions.len() - 1,
            "dimension": ds.dimension(),
            "concepts": ds.concepts(),
            "sets": ds.set_ids(),
            "versions": versions,
            "projections": projections,
            "jobs": jobs,
        })
    }

    /// Registers a job, emits `queued` and hands it to the worker.
    pub fn submit(&self, spec: JobSpec) -> String {
        let kind = spec.kind();
        let id = {
            let mut table = self.jobs.lock().unwrap();
            table.next += 1;
            let id = format!("job-{}", table.next);
            table.jobs.insert(
                id.clone(),
                JobStatus {
                    job_id: id.clone(),
                    kind,
                    phase: Phase::Queued,
                    events: Vec::new(),
                },
            );
            id
        };
        self.emit(&id, Phase::Queued, |_| {});
        if self.queue.send(Job { id: id.clone(), spec }).is_err() {
            self.emit(&id, Phase::Failed, |e| e.error = Some(json!({"error": "WorkerStopped", "message": "session worker stopped"})));
        }
        id
    }

    fn emit(&self, job_id: &str, phase: Phase, fill: impl FnOnce(&mut JobEvent)) {
        let mut table = self.jobs.lock().unwrap();
        table.seq += 1;
        let seq = table.seq;
        let Some(status) = table.jobs.get_mut(job_id) else { return };
        let mut event = JobEvent {
            job_id: job_id.to_string(),
            seq,
            phase,
            kind: status.kind,
            epoch: None,
            loss: None,
            result: None,
            error: None,
        };
        fill(&mut event);
        status.phase = phase;
        status.events.push(event.clone());
        // Sending under the lock keeps subscribers in `seq` order.
        let _ = self.events.send(event);
    }

    fn progress(&self, job_id: &str, epoch: usize, loss: f64) {
        self.emit(job_id, Phase::Progress, |e| {
            e.epoch = Some(epoch);
            e.loss = Some(loss);
        });
    }

    fn run(&self, job_id: &str, spec: JobSpec) -> ApiResult<Value> {
        match spec {
            JobSpec::Projection(req) => self.run_projection(job_id, req),
            JobSpec::Directive { directive, config } => self.run_directive(job_id, &directive, &config),
        }
    }

    fn run_projection(&self, job_id: &str, req: ProjectionRequest) -> ApiResult<Value> {
        let version = self.version(req.version)?;
        let config = req.config.unwrap_or_default();
        let seed = req.seed.unwrap_or(config.seed);
        let ds = &version.dataset;
        let (layout, model, loss) = match req.projector {
            ProjectorKind::Mfm => {
                let cfg = MfmConfig { seed, ..config.clone() };
                let stride = (cfg.epochs / PROGRESS_EVENTS).max(1);
                let last = cfg.epochs.saturating_sub(1);
                let out = train_mfm_with(ds, &cfg, |r| {
                    if r.epoch % stride == 0 || r.epoch == last {
                        self.progress(job_id, r.epoch, r.parts.total);
                    }
                    true
                })?;
                (out.layout, Some(Arc::new(out.model)), Some(out.final_parts))
            }
            kind => (project(ds, kind, &config, seed)?, None, None),
        };
        let record = describe(version.index, ds, req.projector, seed, ProjectionSource::Trained, layout, model, loss, config)?;
        let record = Arc::new(record);
        let mut state = self.state.write().unwrap();
        state.projections.insert(version.index, record.clone());
        drop(state);
        Ok(serde_json::to_value(&*record).expect("projection serializes"))
    }

    /// Re-projects `ds` the way `prev` was produced: through the stored MFM
    /// model when there is one, otherwise by re-running the projector.
    fn reproject(&self, index: usize, ds: &EmbeddingDataset, prev: Option<&ProjectionRecord>) -> ApiResult<Option<ProjectionRecord>> {
        let Some(prev) = prev else { return Ok(None) };
        let record = match &prev.model {
            Some(model) => {
                let layout = forward(model, ds)?;
                let cfg = prev.config.clone();
                describe(index, ds, prev.projector, prev.seed, ProjectionSource::Forward, layout, Some(model.clone()), None, cfg)?
            }
            None => {
                let layout = project(ds, prev.projector, &prev.config, prev.seed)?;
                describe(index, ds, prev.projector, prev.seed, ProjectionSource::Trained, layout, None, None, prev.config.clone())?
            }
        };
        Ok(Some(record))
    }

    fn run_directive(&self, job_id: &str, directive: &AlignmentDirective, config: &AdapterConfig) -> ApiResult<Value> {
        let base = self.latest();
        let ds = &base.dataset;
        let batch = build_triplets(directive, ds, config)?;
        let before = verify_alignment(directive, ds, None, config.neighborhood)?;
        let stride = (config.epochs / PROGRESS_EVENTS).max(1);
        let run = train_adapter_with(ds, &batch, config, Some(directive), |r| {
            if r.epoch % stride == 0 || r.epoch == config.epochs {
                self.progress(job_id, r.epoch, r.hinge);
            }
            true
        })?;
        let after = verify_alignment(directive, ds, Some(&run.adapter), config.neighborhood)?;
        let adapter = Arc::new(run.adapter);

        // Augmentations may land while training runs; the adapter then maps
        // the newest version instead.
        loop {
            let latest = self.latest();
            let adapted = apply_adapter(&latest.dataset, &adapter)?;
            let prev = self.state.read().unwrap().projections.get(&latest.index).cloned();
            let index = latest.index + 1;
            let projection = self.reproject(index, &adapted, prev.as_deref())?;
            let mut state = self.state.write().unwrap();
            if state.versions.len() != index {
                continue;
            }
            let version = Version {
                index,
                parent: Some(latest.index),
                origin: VersionOrigin::Directive { job_id: job_id.to_string() },
                dataset: Arc::new(adapted),
                adapter: Some(adapter.clone()),
            };
            self.snapshot(&version);
            state.versions.push(version);
            let projection = projection.map(Arc::new);
            if let Some(p) = &projection {
                state.projections.insert(index, p.clone());
            }
            drop(state);
            return Ok(json!({
                "version": index,
                "parent": latest.index,
                "triplets": batch.triplets.len(),
                "initialHinge": run.initial_hinge,
                "finalHinge": run.final_hinge,
                "before": before,
                "verification": after,
                "projection": projection.as_deref(),
            }));
        }
    }

    /// Adds points given in the loaded embedding space: they pass through every
    /// adapter on the path to the latest version before joining it.
    pub fn augment(&self, points: Vec<EmbeddingPoint>, set_id: &str) -> ApiResult<Value> {
        if points.is_empty() {
            return Err(ApiError::bad_request("no points to add"));
        }
        if set_id.is_empty() {
            return Err(ApiError::bad_request("setId must be non-empty"));
        }
        let mut state = self.state.write().unwrap();
        let latest = state.versions.last().cloned().expect("a session always has v0");
        let points: Vec<EmbeddingPoint> = points
            .into_iter()
            .map(|p| EmbeddingPoint {
                set_id: Some(set_id.to_string()),
                ..p
            })
            .collect();
        let added = points.len();
        let mut fresh = EmbeddingDataset::new(latest.dataset.dimension(), points, Vec::new())?;
        let mut chain = Vec::new();
        let mut cursor = Some(latest.index);
        while let Some(i) = cursor {
            let v = &state.versions[i];
            if let Some(a) = &v.adapter {
                chain.push(a.clone());
            }
            cursor = v.parent;
        }
        for adapter in chain.iter().rev() {
            fresh = apply_adapter(&fresh, adapter)?;
        }
        let dataset = latest.dataset.extend(fresh.points().to_vec())?;
        let index = latest.index + 1;
        let projection = self.reproject(index, &dataset, state.projections.get(&latest.index).map(|p| &**p).filter(|p| p.model.is_some()))?;
        let version = Version {
            index,
            parent: Some(latest.index),
            origin: VersionOrigin::Augment {
                set_id: set_id.to_string(),
                added,
            },
            dataset: Arc::new(dataset),
            adapter: None,
        };
        self.snapshot(&version);
        state.versions.push(version);
        if let Some(p) = projection {
            state.projections.insert(index, Arc::new(p));
        }
        Ok(json!({ "added": added, "version": index }))
    }

    pub fn resolve_path(&self, relative: &str) -> ApiResult<PathBuf> {
        contained(&self.data_dir, relative)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }
}

/// Adds contours and the k=30 quality summary to a layout.
#[allow(clippy::too_many_arguments)]
fn describe(
    version: usize,
    ds: &EmbeddingDataset,
    projector: ProjectorKind,
    seed: u64,
    source: ProjectionSource,
    layout: ProjectionLayout,
    model: Option<Arc<ProjectionModel>>,
    loss: Option<LossParts>,
    config: MfmConfig,
) -> ApiResult<ProjectionRecord> {
    let contours = set_contours(ds, &layout, &KdeOptions::default(), &DEFAULT_LEVEL_FRACTIONS)?;
    let (quality, quality_error) = match evaluate_layout(ds, &layout, DEFAULT_K) {
        Ok(q) => (Some(q), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ProjectionRecord {
        version,
        projector,
        seed,
        source,
        layout,
        contours,
        quality,
        quality_error,
        loss,
        model,
        config,
    })
}

async fn worker(session: Arc<Session>, mut rx: mpsc::UnboundedReceiver<Job>) {
    while let Some(job) = rx.recv().await {
        session.emit(&job.id, Phase::Running, |_| {});
        let s = session.clone();
        let id = job.id.clone();
        let outcome = tokio::task::spawn_blocking(move || s.run(&id, job.spec)).await;
        let outcome = outcome.unwrap_or_else(|e| {
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "JobPanicked", e.to_string()))
        });
        match outcome {
            Ok(result) => {
                tracing::info!(session = %session.id, job = %job.id, "job completed");
                session.emit(&job.id, Phase::Completed, |e| e.result = Some(result));
            }
            Err(err) => {
                tracing::warn!(session = %session.id, job = %job.id, error = %err.message, "job failed");
                session.emit(&job.id, Phase::Failed, |e| e.error = Some(err.body()));
            }
        }
    }
}
