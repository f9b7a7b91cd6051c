use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::UNIX_EPOCH;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Mutex};

use lots_core::checkpoint::load_checkpoint;
use lots_core::diffusion::{sample, LotsModel};
use lots_core::sketchy::{DatasetRecord, Manifest};

use crate::api::{validate, GenerationRequest, ValidatedRequest};
use crate::config::StudioConfig;
use crate::error::StudioError;
use crate::store::{now_ms, RunRecord, RunStatus, RunStore, Timings};

pub const CHECKPOINT_EXT: &str = "safetensors";

/// A loaded model and the checkpoint id it came from. Never mutated; a load
/// replaces the whole snapshot.
pub struct ActiveModel {
    pub id: String,
    pub model: LotsModel,
}

struct Job {
    run_id: String,
    request: ValidatedRequest,
}

struct Dataset {
    root: PathBuf,
    records: Vec<DatasetRecord>,
}

pub struct AppState {
    cfg: StudioConfig,
    store: Arc<RunStore>,
    active: RwLock<Option<Arc<ActiveModel>>>,
    load_lock: Mutex<()>,
    queue: mpsc::Sender<Job>,
    dataset: Option<Dataset>,
    seq: AtomicU64,
}

/// The service: shared state plus the worker pool draining the job queue.
#[derive(Clone)]
pub struct Studio {
    state: Arc<AppState>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, StudioError> + Send + 'static) -> Result<T, StudioError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudioError::Storage(format!("blocking task failed: {e}")))?
}

/// Checkpoint ids are file stems: ASCII letters, digits, `.`, `_` and `-`,
/// not starting with a dot.
pub fn checkpoint_path(dir: &FsPath, id: &str) -> Result<PathBuf, StudioError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if !ok {
        return Err(StudioError::validation("id", format!("`{id}` is not a valid checkpoint id")));
    }
    Ok(dir.join(format!("{id}.{CHECKPOINT_EXT}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub size_bytes: u64,
    pub modified_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointList {
    pub active: Option<String>,
    pub checkpoints: Vec<CheckpointInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: Option<String>,
    pub image_size: Option<usize>,
    pub canvas: usize,
    pub max_pairs: usize,
    pub default_alpha: f64,
    pub default_steps: usize,
    pub workers: usize,
    pub queue_capacity: usize,
    pub queued: usize,
    pub dataset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub run_id: String,
    pub status: RunStatus,
    pub request_digest: String,
    pub seed: u64,
}

/// A run record plus the URL of its image once one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    #[serde(flatten)]
    pub record: RunRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

impl From<RunRecord> for RunView {
    fn from(record: RunRecord) -> Self {
        let image_url = record.image_sha256.as_ref().map(|_| format!("/runs/{}/image", record.run_id));
        Self { record, image_url }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadResult {
    pub active: String,
    pub previous: Option<String>,
}

impl AppState {
    fn active(&self) -> Option<Arc<ActiveModel>> {
        self.active.read().unwrap().clone()
    }

    fn next_run_id(&self) -> String {
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        format!("{:x}-{:04x}-{:08x}", now_ms(), n & 0xffff, rand::random::<u32>())
    }

    fn run_job(&self, job: Job) {
        let snapshot = self.active();
        let ckpt = snapshot.as_ref().map(|m| m.id.clone());
        let started = self.store.update(&job.run_id, |r| {
            r.status = RunStatus::Running;
            r.timings.started_ms = Some(now_ms());
            r.checkpoint_id = ckpt;
        });
        if let Err(e) = started {
            log::error!("run {}: {e}", job.run_id);
            return;
        }
        let opts = job.request.resolved.sample_options(&job.run_id);
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let m = snapshot.ok_or_else(|| StudioError::Unavailable("no checkpoint loaded".into()))?;
            let img = sample(&m.model, &job.request.conditions, &job.request.global, &opts)?;
            let sha = self.store.put_image(&img.to_png_bytes()?)?;
            Ok::<_, StudioError>((sha, img.provenance))
        }))
        .unwrap_or_else(|_| Err(StudioError::Storage("sampling panicked".into())));
        let finished = self.store.update(&job.run_id, |r| {
            r.timings.finished_ms = Some(now_ms());
            match outcome {
                Ok((sha, prov)) => {
                    r.status = RunStatus::Done;
                    r.image_sha256 = Some(sha);
                    r.provenance = Some(prov);
                }
                Err(e) => {
                    r.status = RunStatus::Failed;
                    r.error = Some(e.to_string());
                }
            }
        });
        match finished {
            Ok(r) => log::info!("run {} {:?}", r.run_id, r.status),
            Err(e) => log::error!("run {}: {e}", job.run_id),
        }
    }

    fn list_checkpoints(&self) -> Result<Vec<CheckpointInfo>, StudioError> {
        let dir = &self.cfg.checkpoint_dir;
        let entries = match std::fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StudioError::storage(dir.display(), e)),
        };
        let mut out = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some(CHECKPOINT_EXT) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if checkpoint_path(dir, id).is_err() {
                continue;
            }
            let Ok(meta) = entry.metadata() else { continue };
            out.push(CheckpointInfo {
                id: id.to_string(),
                size_bytes: meta.len(),
                modified_ms: meta
                    .modified()
                    .ok()
                    .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                    .map_or(0, |d| d.as_millis() as u64),
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    fn health(&self) -> Health {
        let active = self.active();
        Health {
            status: "ok".into(),
            checkpoint: active.as_ref().map(|m| m.id.clone()),
            image_size: active.as_ref().map(|m| m.model.config().image_size()),
            canvas: self.cfg.canvas,
            max_pairs: self.cfg.max_pairs,
            default_alpha: self.cfg.default_alpha,
            default_steps: self.cfg.default_steps,
            workers: self.cfg.workers,
            queue_capacity: self.cfg.queue_capacity,
            queued: self.cfg.queue_capacity - self.queue.capacity(),
            dataset: self.dataset.is_some(),
        }
    }
}

impl Studio {
    /// Opens the run store, loads the configured checkpoint and dataset, and
    /// starts the workers. Must run inside a tokio runtime.
    pub async fn new(cfg: StudioConfig) -> Result<Self, StudioError> {
        cfg.validate()?;
        let data_dir = cfg.data_dir.clone();
        let store = Arc::new(blocking(move || RunStore::open(&data_dir)).await?);
        let active = match &cfg.checkpoint {
            Some(id) => {
                let path = checkpoint_path(&cfg.checkpoint_dir, id)?;
                let id = id.clone();
                let model = blocking(move || Ok(load_checkpoint(&path)?)).await?;
                Some(Arc::new(ActiveModel { id, model }))
            }
            None => None,
        };
        let dataset = match &cfg.dataset_dir {
            Some(dir) => {
                let root = dir.clone();
                let manifest = blocking(move || Ok(Manifest::read(&root.join("manifest.json"))?)).await?;
                Some(Dataset {
                    root: dir.clone(),
                    records: manifest.records,
                })
            }
            None => None,
        };
        let (tx, rx) = mpsc::channel(cfg.queue_capacity);
        let state = Arc::new(AppState {
            store,
            active: RwLock::new(active),
            load_lock: Mutex::new(()),
            queue: tx,
            dataset,
            seq: AtomicU64::new(0),
            cfg,
        });
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..state.cfg.workers {
            let (state, rx) = (Arc::clone(&state), Arc::clone(&rx));
            tokio::spawn(async move {
                loop {
                    let job = rx.lock().await.recv().await;
                    let Some(job) = job else { break };
                    let st = Arc::clone(&state);
                    if let Err(e) = tokio::task::spawn_blocking(move || st.run_job(job)).await {
                        log::error!("worker task failed: {e}");
                    }
                }
            });
        }
        Ok(Self { state })
    }

    pub fn config(&self) -> &StudioConfig {
        &self.state.cfg
    }

    pub fn active_checkpoint(&self) -> Option<String> {
        self.state.active().map(|m| m.id.clone())
    }

    pub fn router(&self) -> Router {
        let router = Router::new()
            .route("/health", get(health))
            .route("/generate", post(generate))
            .route("/runs", get(list_runs))
            .route("/runs/{id}", get(get_run))
            .route("/runs/{id}/image", get(run_image))
            .route("/images/{sha}", get(image_by_hash))
            .route("/checkpoints", get(list_checkpoints))
            .route("/checkpoints/{id}/load", post(load))
            .route("/dataset/records", get(dataset_records))
            .route("/dataset/records/{image_id}", get(dataset_record))
            .route("/dataset/files/{*path}", get(dataset_file))
            .with_state(Arc::clone(&self.state));
        let origins: Vec<HeaderValue> = self.state.cfg.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        if origins.is_empty() {
            router
        } else {
            router.layer(
                tower_http::cors::CorsLayer::new()
                    .allow_origin(origins)
                    .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
                    .allow_headers([header::CONTENT_TYPE]),
            )
        }
    }
}

type AppResult<T> = Result<T, StudioError>;
type St = State<Arc<AppState>>;

async fn health(State(s): St) -> Json<Health> {
    Json(s.health())
}

async fn generate(State(s): St, body: Bytes) -> AppResult<(StatusCode, Json<Submitted>)> {
    let req: GenerationRequest =
        serde_json::from_slice(&body).map_err(|e| StudioError::validation("body", e))?;
    let active = s
        .active()
        .ok_or_else(|| StudioError::Unavailable("no checkpoint loaded".into()))?;
    let request = validate(&req, &s.cfg, &active.model.config().global_text, || u64::from(rand::random::<u32>()))?;
    let permit = s
        .queue
        .try_reserve()
        .map_err(|_| StudioError::Unavailable("generation queue is full".into()))?;
    let run_id = s.next_run_id();
    let record = RunRecord {
        run_id: run_id.clone(),
        status: RunStatus::Pending,
        request_digest: request.resolved.digest(),
        request: request.resolved.clone(),
        checkpoint_id: None,
        timings: Timings {
            submitted_ms: now_ms(),
            ..Default::default()
        },
        image_sha256: None,
        provenance: None,
        error: None,
    };
    let submitted = Submitted {
        run_id: run_id.clone(),
        status: RunStatus::Pending,
        request_digest: record.request_digest.clone(),
        seed: record.request.seed,
    };
    let store = Arc::clone(&s.store);
    blocking(move || store.append(record)).await?;
    permit.send(Job { run_id, request });
    Ok((StatusCode::ACCEPTED, Json(submitted)))
}

async fn list_runs(State(s): St) -> Json<Vec<RunView>> {
    Json(s.store.list().into_iter().map(RunView::from).collect())
}

fn find_run(s: &AppState, id: &str) -> AppResult<RunRecord> {
    s.store.get(id).ok_or_else(|| StudioError::NotFound(format!("run {id}")))
}

async fn get_run(State(s): St, Path(id): Path<String>) -> AppResult<Json<RunView>> {
    Ok(Json(find_run(&s, &id)?.into()))
}

fn png_response(bytes: Vec<u8>) -> Response {
    (
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response()
}

async fn run_image(State(s): St, Path(id): Path<String>) -> AppResult<Response> {
    let r = find_run(&s, &id)?;
    let Some(sha) = r.image_sha256 else {
        return Err(StudioError::NotReady(format!("run {id} is {:?} and has no image", r.status).to_lowercase()));
    };
    let store = Arc::clone(&s.store);
    Ok(png_response(blocking(move || store.read_image(&sha)).await?))
}

async fn image_by_hash(State(s): St, Path(sha): Path<String>) -> AppResult<Response> {
    let sha = sha.strip_suffix(".png").unwrap_or(&sha).to_string();
    if sha.len() != 64 || !sha.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()) {
        return Err(StudioError::validation("sha", "expected 64 lowercase hex digits"));
    }
    if !s.store.image_path(&sha).exists() {
        return Err(StudioError::NotFound(format!("image {sha}")));
    }
    let store = Arc::clone(&s.store);
    Ok(png_response(blocking(move || store.read_image(&sha)).await?))
}

async fn list_checkpoints(State(s): St) -> AppResult<Json<CheckpointList>> {
    let st = Arc::clone(&s);
    let checkpoints = blocking(move || st.list_checkpoints()).await?;
    Ok(Json(CheckpointList {
        active: s.active().map(|m| m.id.clone()),
        checkpoints,
    }))
}

async fn load(State(s): St, Path(id): Path<String>) -> AppResult<Json<LoadResult>> {
    let path = checkpoint_path(&s.cfg.checkpoint_dir, &id)?;
    let _guard = s.load_lock.lock().await;
    if !path.is_file() {
        return Err(StudioError::NotFound(format!("checkpoint {id}")));
    }
    let model = blocking(move || load_checkpoint(&path).map_err(|e| StudioError::CheckpointRejected(e.to_string()))).await?;
    let previous = {
        let mut slot = s.active.write().unwrap();
        let prev = slot.as_ref().map(|m| m.id.clone());
        *slot = Some(Arc::new(ActiveModel { id: id.clone(), model }));
        prev
    };
    log::info!("loaded checkpoint {id}");
    Ok(Json(LoadResult { active: id, previous }))
}

fn dataset(s: &AppState) -> AppResult<&Dataset> {
    s.dataset.as_ref().ok_or_else(|| StudioError::NotFound("no dataset configured".into()))
}

async fn dataset_records(State(s): St) -> AppResult<Json<Vec<DatasetRecord>>> {
    Ok(Json(dataset(&s)?.records.clone()))
}

async fn dataset_record(State(s): St, Path(image_id): Path<u64>) -> AppResult<Json<DatasetRecord>> {
    dataset(&s)?
        .records
        .iter()
        .find(|r| r.image_id == image_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| StudioError::NotFound(format!("dataset record {image_id}")))
}

async fn dataset_file(State(s): St, Path(rel): Path<String>) -> AppResult<Response> {
    let d = dataset(&s)?;
    let rel = PathBuf::from(&rel);
    if rel.extension().and_then(|e| e.to_str()) != Some("png")
        || !rel.components().all(|c| matches!(c, Component::Normal(_)))
    {
        return Err(StudioError::validation("path", "expected a relative path to a PNG file"));
    }
    let path = d.root.join(rel);
    if !path.is_file() {
        return Err(StudioError::NotFound(format!("{}", path.display())));
    }
    Ok(png_response(blocking(move || std::fs::read(&path).map_err(|e| StudioError::storage("dataset file", e))).await?))
}

/// Binds `listener` and serves until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    studio: Studio,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), StudioError> {
    axum::serve(listener, studio.router())
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| StudioError::storage("server", e))
}

/// Runs the service on the configured address until Ctrl-C.
pub async fn serve(cfg: StudioConfig) -> Result<(), StudioError> {
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| StudioError::Config(format!("address {}:{}: {e}", cfg.host, cfg.port)))?;
    let studio = Studio::new(cfg).await?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| StudioError::Config(format!("bind {addr}: {e}")))?;
    log::info!("listening on http://{}", listener.local_addr().map_or(addr, |a| a));
    serve_on(listener, studio, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_ids_are_sanitized() {
        let dir = FsPath::new("/ckpt");
        assert_eq!(checkpoint_path(dir, "tiny-v1.2").unwrap(), PathBuf::from("/ckpt/tiny-v1.2.safetensors"));
        for bad in ["", "../etc", ".hidden", "a/b", "a b", "x\0"] {
            assert!(checkpoint_path(dir, bad).is_err(), "{bad:?}");
        }
    }
}
