//! HTTP job service. Requests become jobs in an append-only JSONL log and
//! a single worker runs them in submission order; results are files under
//! the storage root, so a restarted service keeps every job and result.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use layoutforge_core::{AspectClass, ClassVocab, ModelCheckpoint};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::requests::{
    run_evaluate, run_generate, run_retarget, EvaluateRequest, GenerateRequest, Output, RetargetRequest,
};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const LOG_FILE: &str = "jobs.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Generate,
    Retarget,
    Evaluate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_final(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub request: Value,
    pub seed: u64,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    /// Result location relative to the API root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default)]
    pub svg_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct StoreInner {
    jobs: BTreeMap<String, Job>,
    by_key: HashMap<String, String>,
    next: u64,
    log: File,
}

/// Job table backed by an append-only log of job snapshots.
pub struct JobStore {
    root: PathBuf,
    inner: Mutex<StoreInner>,
}

impl JobStore {
    /// Opens or creates the store under `root`, replaying its log. The
    /// last snapshot of each job wins.
    pub fn open(root: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("results")).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(LOG_FILE);
        let mut jobs = BTreeMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let job: Job =
                    serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
                jobs.insert(job.id.clone(), job);
            }
        }
        let by_key = jobs
            .values()
            .filter_map(|j| j.idempotency_key.clone().map(|k| (k, j.id.clone())))
            .collect();
        let next = jobs.len() as u64 + 1;
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            root,
            inner: Mutex::new(StoreInner {
                jobs,
                by_key,
                next,
                log,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn record(inner: &mut StoreInner, job: Job) -> anyhow::Result<()> {
        let mut line = serde_json::to_string(&job)?;
        line.push('\n');
        inner.log.write_all(line.as_bytes())?;
        inner.log.sync_data()?;
        inner.jobs.insert(job.id.clone(), job);
        Ok(())
    }

    /// Creates a job, or returns the existing one for a known idempotency
    /// key. The flag is true for a new job.
    pub fn create(
        &self,
        kind: JobKind,
        request: Value,
        seed: u64,
        key: Option<String>,
        failure: Option<String>,
    ) -> anyhow::Result<(Job, bool)> {
        let mut inner = self.lock();
        if let Some(id) = key.as_ref().and_then(|k| inner.by_key.get(k)) {
            return Ok((inner.jobs[id].clone(), false));
        }
        let id = format!("job-{:06}", inner.next);
        inner.next += 1;
        let job = Job {
            id: id.clone(),
            kind,
            request,
            seed,
            status: if failure.is_some() {
                JobStatus::Failed
            } else {
                JobStatus::Queued
            },
            idempotency_key: key.clone(),
            result: None,
            svg_count: 0,
            error: failure,
        };
        Self::record(&mut inner, job.clone())?;
        if let Some(k) = key {
            inner.by_key.insert(k, id);
        }
        Ok((job, true))
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.lock().jobs.get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.lock().jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of jobs that have not finished, in submission order.
    pub fn pending(&self) -> Vec<String> {
        self.lock()
            .jobs
            .values()
            .filter(|j| !j.status.is_final())
            .map(|j| j.id.clone())
            .collect()
    }

    /// Applies `f` to a job and logs the new snapshot. Status never moves
    /// backwards.
    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> anyhow::Result<Job> {
        let mut inner = self.lock();
        let mut job = inner
            .jobs
            .get(id)
            .cloned()
            .with_context(|| format!("unknown job {id}"))?;
        let before = job.status;
        f(&mut job);
        anyhow::ensure!(
            job.status >= before,
            "job {id} cannot move from {before:?} to {:?}",
            job.status
        );
        Self::record(&mut inner, job.clone())?;
        Ok(job)
    }

    pub fn result_dir(&self, id: &str) -> PathBuf {
        self.root.join("results").join(id)
    }

    fn write_result(&self, id: &str, output: &Output) -> anyhow::Result<()> {
        let dir = self.result_dir(id);
        fs::create_dir_all(dir.join("svg"))?;
        for (n, svg) in output.svgs.iter().enumerate() {
            fs::write(dir.join("svg").join(format!("{n}.svg")), svg)?;
        }
        fs::write(
            dir.join("layouts.json"),
            serde_json::to_string_pretty(&output.document)?,
        )?;
        Ok(())
    }
}

/// Checkpoints served by the service. Generation picks the checkpoint
/// whose aspect class matches the canvas, falling back to one trained on
/// every aspect class.
#[derive(Default)]
pub struct Models {
    pub generators: Vec<ModelCheckpoint>,
    pub adjust: Option<ModelCheckpoint>,
}

impl Models {
    pub fn generator_for(&self, aspect: AspectClass) -> Option<&ModelCheckpoint> {
        self.generators
            .iter()
            .find(|c| c.config.aspect_class == Some(aspect))
            .or_else(|| self.generators.iter().find(|c| c.config.aspect_class.is_none()))
    }

    fn vocab(&self) -> ClassVocab {
        self.generators
            .first()
            .or(self.adjust.as_ref())
            .map_or_else(ClassVocab::default, |c| c.config.classes.clone())
    }
}

struct Shared {
    store: JobStore,
    models: Models,
    queue: mpsc::UnboundedSender<String>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn store(&self) -> &JobStore {
        &self.0.store
    }
}

/// Opens the store, starts the worker and re-queues unfinished jobs.
/// Must be called inside a Tokio runtime.
pub fn start(root: impl Into<PathBuf>, models: Models) -> anyhow::Result<AppState> {
    let store = JobStore::open(root)?;
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let pending = store.pending();
    let state = AppState(Arc::new(Shared {
        store,
        models,
        queue: tx,
    }));
    let worker = state.clone();
    tokio::spawn(async move {
        while let Some(id) = rx.recv().await {
            let s = worker.clone();
            let job_id = id.clone();
            let outcome = tokio::task::spawn_blocking(move || execute(&s, &job_id)).await;
            if let Err(e) = outcome {
                let _ = worker.store().update(&id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(format!("worker crashed: {e}"));
                });
            }
        }
    });
    for id in pending {
        let _ = state.0.queue.send(id);
    }
    Ok(state)
}

fn parse<T: DeserializeOwned>(value: &Value) -> anyhow::Result<T> {
    Ok(serde_json::from_value(value.clone())?)
}

fn run_job(shared: &Shared, job: &Job) -> anyhow::Result<Output> {
    let output = match job.kind {
        JobKind::Generate => {
            let req: GenerateRequest = parse(&job.request)?;
            let canvas = req.canvas.canvas()?;
            let ckpt = shared
                .models
                .generator_for(canvas.aspect_class)
                .with_context(|| format!("no generation checkpoint for {} canvases", canvas.aspect_class.as_str()))?;
            run_generate(&req, ckpt)?.1
        }
        JobKind::Retarget => {
            let req: RetargetRequest = parse(&job.request)?;
            let ckpt = shared
                .models
                .adjust
                .as_ref()
                .context("no adjustment checkpoint loaded")?;
            run_retarget(&req, ckpt)?.1
        }
        JobKind::Evaluate => run_evaluate(&parse(&job.request)?, &shared.models.vocab())?.1,
    };
    Ok(output)
}

fn execute(state: &AppState, id: &str) {
    let shared = &state.0;
    let Ok(job) = shared.store.update(id, |j| j.status = JobStatus::Running) else {
        return;
    };
    let outcome = run_job(shared, &job).and_then(|out| {
        shared.store.write_result(id, &out)?;
        Ok(out.svgs.len())
    });
    let _ = shared.store.update(id, |j| match outcome {
        Ok(n) => {
            j.status = JobStatus::Done;
            j.result = Some(format!("/api/results/{id}/layouts"));
            j.svg_count = n;
        }
        Err(e) => {
            j.status = JobStatus::Failed;
            j.error = Some(format!("{e:#}"));
        }
    });
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

/// Parses the body, applies the cheap up-front check and creates the job.
/// Requests failing the check become failed jobs at once.
fn submit<T: DeserializeOwned + Serialize>(
    state: &AppState,
    kind: JobKind,
    headers: &HeaderMap,
    body: &Bytes,
    seed: impl Fn(&T) -> u64,
    check: impl Fn(&Shared, &T) -> Result<(), String>,
) -> Response {
    let req: T = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let value = match serde_json::to_value(&req) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let failure = check(&state.0, &req).err();
    let queued = failure.is_none();
    match state
        .0
        .store
        .create(kind, value, seed(&req), idempotency_key(headers), failure)
    {
        Ok((job, created)) => {
            if created && queued {
                let _ = state.0.queue.send(job.id.clone());
            }
            let code = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
            (code, Json(job)).into_response()
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
    }
}

async fn post_generate(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    submit::<GenerateRequest>(
        &state,
        JobKind::Generate,
        &headers,
        &body,
        |r| r.seed,
        |shared, req| {
            let canvas = req.canvas.canvas().map_err(|e| e.to_string())?;
            let ckpt = shared
                .models
                .generator_for(canvas.aspect_class)
                .ok_or_else(|| format!("no generation checkpoint for {} canvases", canvas.aspect_class.as_str()))?;
            req.validate(&ckpt.config.classes)
                .map(|_| ())
                .map_err(|e| e.to_string())
        },
    )
}

async fn post_retarget(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    submit::<RetargetRequest>(
        &state,
        JobKind::Retarget,
        &headers,
        &body,
        |r| r.seed,
        |shared, req| {
            let ckpt = shared.models.adjust.as_ref().ok_or("no adjustment checkpoint loaded")?;
            req.validate(&ckpt.config.classes)
                .map(|_| ())
                .map_err(|e| e.to_string())
        },
    )
}

async fn post_evaluate(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    submit::<EvaluateRequest>(&state, JobKind::Evaluate, &headers, &body, |_| 0, |_, _| Ok(()))
}

async fn get_job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match state.store().get(&id) {
        Some(job) => Json(job).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

fn finished(state: &AppState, id: &str) -> Result<Job, Response> {
    let job = state
        .store()
        .get(id)
        .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown job {id}")))?;
    match job.status {
        JobStatus::Done => Ok(job),
        JobStatus::Failed => Err(error(
            StatusCode::CONFLICT,
            format!("job {id} failed: {}", job.error.as_deref().unwrap_or("")),
        )),
        _ => Err(error(StatusCode::CONFLICT, format!("job {id} is not finished"))),
    }
}

fn read(path: &Path) -> Result<String, Response> {
    fs::read_to_string(path).map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))
}

async fn get_layouts(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let run = || -> Result<Response, Response> {
        finished(&state, &id)?;
        let text = read(&state.store().result_dir(&id).join("layouts.json"))?;
        Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
    };
    run().unwrap_or_else(|e| e)
}

async fn get_svg(State(state): State<AppState>, UrlPath((id, n)): UrlPath<(String, usize)>) -> Response {
    let run = || -> Result<Response, Response> {
        let job = finished(&state, &id)?;
        if n >= job.svg_count {
            return Err(error(
                StatusCode::NOT_FOUND,
                format!("job {id} has {} renderings", job.svg_count),
            ));
        }
        let text = read(&state.store().result_dir(&id).join("svg").join(format!("{n}.svg")))?;
        Ok(([(header::CONTENT_TYPE, "image/svg+xml")], text).into_response())
    };
    run().unwrap_or_else(|e| e)
}

async fn health(State(state): State<AppState>) -> Response {
    let models = &state.0.models;
    let generators: Vec<&str> = models
        .generators
        .iter()
        .map(|c| c.config.aspect_class.map_or("any", |a| a.as_str()))
        .collect();
    Json(json!({
        "status": "ok",
        "generators": generators,
        "adjust": models.adjust.is_some(),
        "jobs": state.store().len(),
    }))
    .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/generate", post(post_generate))
        .route("/api/retarget", post(post_retarget))
        .route("/api/evaluate", post(post_evaluate))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/results/{id}/layouts", get(get_layouts))
        .route("/api/results/{id}/svg/{n}", get(get_svg))
        .route("/api/health", get(health))
        .with_state(state)
}
