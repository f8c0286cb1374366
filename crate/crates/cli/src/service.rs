//! HTTP service driving the generate / segment / annotate / edit / sample
//! loop. Sessions are single-writer: a request that finds its session busy
//! gets `409 Conflict`. Long operations run as jobs on a bounded worker pool
//! and can be polled at `/jobs/{id}`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lse_core::archive::ProbeArchive;
use lse_core::latentopt::{self, ColorStroke, EditSpec, OptSettings};
use lse_core::metrics;
use lse_core::probes::{self, FewShotOptions, ProbeWeights, SemanticPredictor, TrainedProbe};
use lse_core::rng::derive_indexed;
use lse_core::{sample_latent, FeatureGenerator, GeneratorConfig, LatentVector, SemanticMask, SyntheticGenerator};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{OwnedMutexGuard, Semaphore};

use crate::commands::SettingsOverride;
use crate::wire;

pub const MAX_ANNOTATIONS: usize = 16;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub generator: GeneratorConfig,
    pub probe: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub latent: LatentVector,
    /// `"create"`, `"semantic"` or `"color"`.
    pub action: String,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub config_hash: String,
    pub created: u64,
    /// Append-only.
    pub history: Vec<HistoryEntry>,
    /// Indices into `history`; the last one is the current state.
    undo_stack: Vec<usize>,
}

impl Session {
    pub fn latent(&self) -> &LatentVector {
        &self.history[*self.undo_stack.last().expect("session has a state")].latent
    }

    fn push(&mut self, latent: LatentVector, action: &str) {
        self.history.push(HistoryEntry {
            latent,
            action: action.into(),
        });
        self.undo_stack.push(self.history.len() - 1);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done { result: Value },
    Failed { error: String },
}

#[derive(Debug)]
pub struct Job {
    pub id: String,
    pub kind: String,
    pub total: usize,
    iteration: AtomicUsize,
    state: Mutex<JobState>,
    done: tokio::sync::Notify,
}

impl Job {
    fn view(&self) -> Value {
        json!({
            "id": self.id,
            "kind": self.kind,
            "iteration": self.iteration.load(Ordering::SeqCst),
            "total": self.total,
            "status": *self.state.lock().unwrap(),
        })
    }

    fn set(&self, state: JobState) {
        *self.state.lock().unwrap() = state;
    }

    /// Iteration counts only move forward.
    fn advance(&self, iteration: usize) {
        self.iteration.fetch_max(iteration, Ordering::SeqCst);
    }
}

pub struct AppState {
    gen: Arc<SyntheticGenerator>,
    probe: RwLock<Arc<TrainedProbe>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    annotations: Mutex<Vec<(LatentVector, SemanticMask)>>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    workers: Arc<Semaphore>,
    counter: AtomicU64,
    seed: u64,
}

impl AppState {
    pub fn new(cfg: ServeConfig) -> lse_core::Result<Arc<Self>> {
        let gen = SyntheticGenerator::new(cfg.generator)?;
        let probe = match &cfg.probe {
            Some(path) => ProbeArchive::load_for(path, &gen)?.probe,
            None => TrainedProbe::Lse(ProbeWeights::for_generator(&gen)),
        };
        Ok(Arc::new(Self {
            gen: Arc::new(gen),
            probe: RwLock::new(Arc::new(probe)),
            sessions: Mutex::default(),
            annotations: Mutex::default(),
            jobs: Mutex::default(),
            workers: Arc::new(Semaphore::new(cfg.workers.max(1))),
            counter: AtomicU64::new(0),
            seed: cfg.seed,
        }))
    }

    fn next_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        format!("{prefix}-{:016x}", derive_indexed(self.seed, prefix, n))
    }

    /// Snapshot of the current extractor; a concurrent hot swap does not
    /// affect holders of the snapshot.
    fn probe(&self) -> Arc<TrainedProbe> {
        self.probe.read().unwrap().clone()
    }

    fn swap_probe(&self, probe: TrainedProbe) {
        *self.probe.write().unwrap() = Arc::new(probe);
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn canvas(&self) -> (usize, usize) {
        self.gen.output_size()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "session is being modified by another request")
    }
}

impl From<wire::WireError> for ApiError {
    fn from(e: wire::WireError) -> Self {
        Self::bad(e.to_string())
    }
}

impl From<lse_core::Error> for ApiError {
    fn from(e: lse_core::Error) -> Self {
        use lse_core::Error as E;
        let status = match e {
            E::Io(_) | E::Divergence { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn render(state: &AppState, probe: &TrainedProbe, z: &LatentVector) -> ApiResult<(String, String)> {
    let stack = state.gen.generate(z)?;
    let mask = probe.mask(&stack)?;
    Ok((
        wire::b64(&wire::image_to_png(&stack.image)?),
        wire::b64(&wire::mask_to_png(&mask)?),
    ))
}

fn session_view(state: &AppState, session: &Session) -> ApiResult<Value> {
    let (image, mask) = render(state, &state.probe(), session.latent())?;
    Ok(json!({
        "id": session.id,
        "config_hash": session.config_hash,
        "created": session.created,
        "latent": session.latent(),
        "history_len": session.history.len(),
        "image": image,
        "mask": mask,
    }))
}

fn parse_optional<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    seed: Option<u64>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewSession = parse_optional(&body)?;
    let id = state.next_id("session");
    let seed = req.seed.unwrap_or_else(|| derive_indexed(state.seed, &id, 0));
    let z = sample_latent(state.gen.latent_dim(), seed, None)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut session = Session {
        id: id.clone(),
        config_hash: state.gen.config_hash(),
        created,
        history: Vec::new(),
        undo_stack: Vec::new(),
    };
    session.push(z, "create");
    let view = session_view(&state, &session)?;
    state
        .sessions
        .lock()
        .unwrap()
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let guard = session.try_lock().map_err(|_| ApiError::busy())?;
    Ok(Json(session_view(&state, &guard)?))
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "names": state.gen.class_names(),
        "palette": state.gen.palette(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    mode: String,
    target: Option<String>,
    stroke: Option<String>,
    region: Option<String>,
    #[serde(default)]
    settings: SettingsOverride,
    #[serde(default, rename = "async")]
    run_async: bool,
}

fn edit_spec(state: &AppState, req: &EditRequest) -> ApiResult<EditSpec> {
    let (h, w) = state.canvas();
    match req.mode.as_str() {
        "semantic" => {
            let target = req.target.as_deref().ok_or_else(|| ApiError::bad("semantic edits need a target mask"))?;
            let target = wire::png_to_mask(&wire::unb64(target)?, h, w, state.gen.num_classes())?;
            Ok(EditSpec::Semantic { target })
        }
        "color" => {
            let stroke = req.stroke.as_deref().ok_or_else(|| ApiError::bad("color edits need a stroke image"))?;
            let region = req.region.as_deref().ok_or_else(|| ApiError::bad("color edits need a region mask"))?;
            let image = wire::png_to_image(&wire::unb64(stroke)?, h, w)?;
            let region = wire::png_to_region(&wire::unb64(region)?, h, w)?;
            if !region.iter().any(|&r| r) {
                return Err(ApiError::bad("region mask is empty"));
            }
            Ok(EditSpec::Color(ColorStroke { image, region }))
        }
        other => Err(ApiError::bad(format!("unknown edit mode {other:?}"))),
    }
}

/// Registers a job and runs `work` on the worker pool once a slot frees.
fn spawn_job<F>(state: &Arc<AppState>, kind: &str, total: usize, work: F) -> Arc<Job>
where
    F: FnOnce(&Job) -> ApiResult<Value> + Send + 'static,
{
    let job = Arc::new(Job {
        id: state.next_id("job"),
        kind: kind.into(),
        total,
        iteration: AtomicUsize::new(0),
        state: Mutex::new(JobState::Queued),
        done: tokio::sync::Notify::new(),
    });
    state.jobs.lock().unwrap().insert(job.id.clone(), job.clone());
    let workers = state.workers.clone();
    let handle = job.clone();
    tokio::spawn(async move {
        let _permit = workers.acquire_owned().await.expect("worker pool closed");
        handle.set(JobState::Running);
        let runner = handle.clone();
        let outcome = tokio::task::spawn_blocking(move || work(&runner)).await;
        handle.set(match outcome {
            Ok(Ok(result)) => JobState::Done { result },
            Ok(Err(e)) => JobState::Failed { error: e.message },
            Err(e) => JobState::Failed { error: e.to_string() },
        });
        handle.done.notify_waiters();
    });
    job
}

/// Waits for `job` and turns its outcome into a response.
async fn finish(job: Arc<Job>) -> ApiResult<Json<Value>> {
    loop {
        let notified = job.done.notified();
        match job.state.lock().unwrap().clone() {
            JobState::Done { result } => return Ok(Json(result)),
            JobState::Failed { error } => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, error)),
            _ => {}
        }
        notified.await;
    }
}

fn accepted(job: &Job) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job.id }))).into_response()
}

async fn edit(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: EditRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))?;
    let session = state.session(&id)?;
    let mut guard: OwnedMutexGuard<Session> = session.try_lock_owned().map_err(|_| ApiError::busy())?;
    let spec = edit_spec(&state, &req)?;
    let settings = req.settings.apply(OptSettings::sie());
    settings.validate()?;
    let probe = state.probe();
    let worker_state = state.clone();
    let job = spawn_job(&state, "edit", settings.iterations, move |job| {
        let z0 = guard.latent().clone();
        let outcome = latentopt::edit_latent_with_progress(&z0, &spec, &settings, &*worker_state.gen, &*probe, |i| {
            job.advance(i)
        })?;
        let (image, mask) = render(&worker_state, &probe, &outcome.latent)?;
        let action = match spec {
            EditSpec::Semantic { .. } => "semantic",
            EditSpec::Color(_) => "color",
        };
        guard.push(outcome.latent.clone(), action);
        Ok(json!({
            "session": guard.id,
            "latent": outcome.latent,
            "image": image,
            "mask": mask,
            "trace": outcome.trace,
            "history_len": guard.history.len(),
        }))
    });
    if req.run_async {
        Ok(accepted(&job))
    } else {
        Ok(finish(job).await?.into_response())
    }
}

async fn undo(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let mut guard = session.try_lock().map_err(|_| ApiError::busy())?;
    if guard.undo_stack.len() < 2 {
        return Err(ApiError::bad("nothing to undo"));
    }
    guard.undo_stack.pop();
    Ok(Json(session_view(&state, &guard)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScsRequest {
    target: String,
    n_samples: usize,
    seed: Option<u64>,
    #[serde(default)]
    settings: SettingsOverride,
    #[serde(default, rename = "async")]
    run_async: bool,
}

async fn scs(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: ScsRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))?;
    let (h, w) = state.canvas();
    let target = wire::png_to_mask(&wire::unb64(&req.target)?, h, w, state.gen.num_classes())?;
    let settings = req.settings.apply(OptSettings::scs());
    settings.validate()?;
    let probe = state.probe();
    if req.n_samples > 0 && settings.iterations > 0 && !probe.is_differentiable() {
        return Err(ApiError::bad("the current extractor is not differentiable"));
    }
    let seed = req.seed.unwrap_or_else(|| derive_indexed(state.seed, "scs-request", state.counter.load(Ordering::SeqCst)));
    let worker_state = state.clone();
    let n = req.n_samples;
    let job = spawn_job(&state, "scs", n, move |job| {
        let classes = worker_state.gen.num_classes();
        let mut samples = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let out = latentopt::scs_sample(&target, &settings, &*worker_state.gen, &*probe, derive_indexed(seed, "scs", i as u64))?;
            let stack = worker_state.gen.generate(&out.latent)?;
            let mask = probe.mask(&stack)?;
            samples.push(json!({
                "latent": out.latent,
                "image": wire::b64(&wire::image_to_png(&stack.image)?),
                "mask": wire::b64(&wire::mask_to_png(&mask)?),
                "agreement": metrics::pair_miou(&target, &mask, classes)?,
                "trace": out.trace,
            }));
            masks.push(mask);
            job.advance(i + 1);
        }
        let agreement = if masks.is_empty() {
            Value::Null
        } else {
            json!(metrics::scs_agreement(&[target.clone()], &[masks], classes)?)
        };
        Ok(json!({ "samples": samples, "agreement": agreement }))
    });
    if req.run_async {
        Ok(accepted(&job))
    } else {
        Ok(finish(job).await?.into_response())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    #[serde(alias = "latent_id")]
    session_id: Option<String>,
    latent: Option<LatentVector>,
    mask: String,
}

async fn add_annotation(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: AnnotationRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))?;
    let latent = match (&req.session_id, req.latent) {
        (Some(id), None) => {
            let session = state.session(id)?;
            let guard = session.try_lock().map_err(|_| ApiError::busy())?;
            guard.latent().clone()
        }
        (None, Some(z)) => {
            if z.dim() != state.gen.latent_dim() || !z.is_finite() {
                return Err(ApiError::bad("latent has the wrong dimension or non-finite entries"));
            }
            z
        }
        _ => return Err(ApiError::bad("give exactly one of session_id and latent")),
    };
    let (h, w) = state.canvas();
    let mask = wire::png_to_mask(&wire::unb64(&req.mask)?, h, w, state.gen.num_classes())?;
    let mut store = state.annotations.lock().unwrap();
    if store.len() >= MAX_ANNOTATIONS {
        return Err(ApiError::bad(format!("annotation store is full ({MAX_ANNOTATIONS})")));
    }
    store.push((latent, mask));
    Ok((StatusCode::CREATED, Json(json!({ "count": store.len() }))))
}

async fn list_annotations(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "count": state.annotations.lock().unwrap().len() }))
}

async fn clear_annotations(State(state): State<Arc<AppState>>) -> Json<Value> {
    state.annotations.lock().unwrap().clear();
    Json(json!({ "count": 0 }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    shots: usize,
    #[serde(default)]
    resample_noise: bool,
}

async fn train_fewshot(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))?;
    let (_, steps) = probes::fewshot_schedule(req.shots)?;
    let anns = {
        let store = state.annotations.lock().unwrap();
        if store.is_empty() {
            return Err(ApiError::bad("no annotations to train on"));
        }
        if store.len() < req.shots {
            return Err(ApiError::bad(format!("{} annotations stored, {} needed", store.len(), req.shots)));
        }
        store[store.len() - req.shots..].to_vec()
    };
    let options = FewShotOptions {
        seed: state.seed,
        resample_noise: req.resample_noise,
        ..FewShotOptions::default()
    };
    let worker_state = state.clone();
    let shots = req.shots;
    let job = spawn_job(&state, "train-fewshot", steps, move |job| {
        let outcome = probes::train_fewshot_with_progress(&*worker_state.gen, &anns, shots, &options, |i| job.advance(i))?;
        worker_state.swap_probe(outcome.probe);
        Ok(json!({
            "shots": shots,
            "iterations": outcome.iterations,
            "final_loss": outcome.loss_curve.last(),
        }))
    });
    Ok(accepted(&job))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state
        .jobs
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))?;
    Ok(Json(job.view()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/undo", post(undo))
        .route("/classes", get(classes))
        .route("/scs", post(scs))
        .route("/annotations", post(add_annotation).get(list_annotations).delete(clear_annotations))
        .route("/train-fewshot", post(train_fewshot))
        .route("/jobs/{id}", get(job_status))
        .with_state(state)
}

pub async fn serve(cfg: ServeConfig, addr: &str) -> std::io::Result<()> {
    let state = AppState::new(cfg).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
