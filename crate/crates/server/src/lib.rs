//! HTTP/JSON service around a trained model: encode shapes into edit
//! sessions, edit them, and generate new shapes.
//!
//! Every endpoint is a thin wrapper over the matching `partgen_core::pipeline`
//! call, seeded with `ChaCha8Rng::seed_from_u64(seed)`.

pub mod sessions;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use partgen_core::model::PartGen;
use partgen_core::pipeline::{self, EditSession, TransformEditOptions};
use partgen_core::wire::{
    CreateSessionRequest, CreateSessionResponse, ErrorBody, GenerateRequest, InterpolateRequest, MetaResponse, MixRequest, PartInfo,
    ResampleRequest, TransformRequest, TransformResponse, WireCloud,
};
use partgen_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use tower_http::cors::CorsLayer;
use tracing::{error, info};

pub use sessions::{Lookup, SessionStore};

pub const DEFAULT_MAX_POINTS: usize = 4096;
pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const MAX_INTERP_STEPS: usize = 100;
pub const MAX_EDIT_ITERS: usize = 2000;

pub struct AppState {
    model: OnceLock<Arc<PartGen>>,
    pub sessions: SessionStore,
    pub max_points: usize,
}

impl AppState {
    /// A service with no model yet; every model-backed endpoint answers 503.
    pub fn loading(max_sessions: usize) -> Arc<Self> {
        Arc::new(Self { model: OnceLock::new(), sessions: SessionStore::new(max_sessions), max_points: DEFAULT_MAX_POINTS })
    }

    pub fn with_model(model: PartGen, max_sessions: usize) -> Arc<Self> {
        let state = Self::loading(max_sessions);
        state.set_model(model);
        state
    }

    /// Installs the model; later calls are ignored.
    pub fn set_model(&self, model: PartGen) {
        let _ = self.model.set(Arc::new(model));
    }

    fn model(&self) -> Result<Arc<PartGen>, ApiError> {
        self.model.get().cloned().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "checkpoint is still loading"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::EmptyPart
            | Error::EmptySet
            | Error::LabelOutOfRange { .. }
            | Error::NonFinite { .. }
            | Error::LengthMismatch(_)
            | Error::InvalidArgument(_)
            | Error::PresenceMismatch
            | Error::AbsentPart { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))
}

fn session(state: &AppState, id: &str) -> Result<sessions::SharedSession, ApiError> {
    match state.sessions.get(id) {
        Lookup::Found(s) => Ok(s),
        Lookup::Evicted => Err(ApiError::new(StatusCode::GONE, format!("session {id} was evicted"))),
        Lookup::Unknown => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))),
    }
}

fn snapshot(state: &AppState, id: &str) -> Result<EditSession, ApiError> {
    Ok(session(state, id)?.lock().unwrap().clone())
}

fn check_points(state: &AppState, n: usize) -> Result<(), ApiError> {
    if n > state.max_points {
        return Err(ApiError::bad(format!("response would carry {n} points, limit is {}", state.max_points)));
    }
    Ok(())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn meta(State(state): State<Arc<AppState>>) -> ApiResult<MetaResponse> {
    let model = state.model()?;
    let c = &model.config;
    Ok(Json(MetaResponse {
        class_id: c.class_id.clone(),
        m: c.m,
        part_names: c.part_names.clone(),
        connections: c.connections.clone(),
        point_budget: c.point_budget,
        max_points: state.max_points,
        stage: model.provenance.stage,
    }))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<CreateSessionResponse> {
    let model = state.model()?;
    let req: CreateSessionRequest = parse(&body)?;
    check_points(&state, req.cloud.len())?;
    if req.cloud.m != model.m() {
        return Err(ApiError::bad(format!("cloud has m = {}, model expects {}", req.cloud.m, model.m())));
    }
    let cloud = req.cloud.to_cloud(&model.config.class_id)?;
    let m2 = model.clone();
    let session = blocking(move || Ok(pipeline::encode_shape(&m2, &cloud)?)).await?;
    let parts = (0..model.m())
        .map(|j| PartInfo { index: j, name: model.config.part_names[j].clone(), present: session.present()[j], points: session.part_sizes[j] })
        .collect();
    let transforms = session.tau.transforms.iter().zip(&session.tau.present).map(|(t, &p)| p.then_some(*t)).collect();
    let (session_id, evicted) = state.sessions.insert(session);
    if let Some(old) = evicted {
        info!(%old, "evicted session");
    }
    Ok(Json(CreateSessionResponse { session_id, parts, transforms }))
}

async fn resample(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<WireCloud> {
    let model = state.model()?;
    let req: ResampleRequest = parse(&body)?;
    let shared = session(&state, &id)?;
    blocking(move || {
        let mut s = shared.lock().unwrap();
        let (cloud, next) = pipeline::resample_parts(&model, &s, &req.parts, &mut rng(req.seed))?;
        *s = next;
        Ok(Json(WireCloud::from_cloud(&cloud)))
    })
    .await
}

async fn mix(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<WireCloud> {
    let model = state.model()?;
    let req: MixRequest = parse(&body)?;
    // Donor snapshots are taken before this session is locked, so two mixes
    // naming each other cannot deadlock.
    let mut donors = Vec::with_capacity(req.donor_session_ids.len());
    for donor in &req.donor_session_ids {
        if *donor != id {
            donors.push((donor.clone(), snapshot(&state, donor)?));
        }
    }
    let m = model.m();
    let mut assignment = vec![0; m];
    for (&part, source) in &req.assignment {
        if part >= m {
            return Err(ApiError::bad(format!("part {part} out of range (m = {m})")));
        }
        if *source != id {
            let k = donors.iter().position(|(d, _)| d == source).ok_or_else(|| ApiError::bad(format!("part {part} names {source}, which is not a donor")))?;
            assignment[part] = k + 1;
        }
    }
    let shared = session(&state, &id)?;
    blocking(move || {
        let mut s = shared.lock().unwrap();
        let mut refs: Vec<&EditSession> = vec![&s];
        refs.extend(donors.iter().map(|(_, d)| d));
        let (cloud, next) = pipeline::mix_parts(&model, &refs, &assignment, &mut rng(req.seed))?;
        *s = next;
        Ok(Json(WireCloud::from_cloud(&cloud)))
    })
    .await
}

async fn interpolate(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Vec<WireCloud>> {
    let model = state.model()?;
    let req: InterpolateRequest = parse(&body)?;
    if req.steps == 0 || req.steps > MAX_INTERP_STEPS {
        return Err(ApiError::bad(format!("steps must lie in 1..={MAX_INTERP_STEPS}")));
    }
    let target = snapshot(&state, &req.target_session)?;
    if req.part >= model.m() || !target.present()[req.part] {
        return Err(ApiError::bad(format!("part {} is not present in the target session", req.part)));
    }
    let shared = session(&state, &id)?;
    let state2 = state.clone();
    blocking(move || {
        let s = shared.lock().unwrap();
        check_points(&state2, (req.steps + 1) * s.part_sizes.iter().sum::<usize>())?;
        let frames = pipeline::interpolate_part(&model, &s, req.part, &target.latents.z[req.part], req.steps, &mut rng(req.seed))?;
        Ok(Json(frames.iter().map(|f| WireCloud::from_cloud(&f.cloud)).collect()))
    })
    .await
}

async fn transform(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<TransformResponse> {
    let model = state.model()?;
    let req: TransformRequest = parse(&body)?;
    let mut opts = TransformEditOptions::default();
    if let Some(n) = req.max_iters {
        if n > MAX_EDIT_ITERS {
            return Err(ApiError::bad(format!("max_iters is limited to {MAX_EDIT_ITERS}")));
        }
        opts.max_iters = n;
    }
    let shared = session(&state, &id)?;
    blocking(move || {
        let mut s = shared.lock().unwrap();
        let out = pipeline::edit_transform(&model, &s, &req.constraints, &opts, &mut rng(req.seed))?;
        *s = out.session;
        Ok(Json(TransformResponse { cloud: WireCloud::from_cloud(&out.cloud), residual: out.residual, converged: out.converged }))
    })
    .await
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Vec<WireCloud>> {
    let model = state.model()?;
    let req: GenerateRequest = parse(&body)?;
    let points = req.points.unwrap_or(model.config.point_budget);
    if req.n == 0 || points < model.m() {
        return Err(ApiError::bad(format!("need n >= 1 and at least {} points per shape", model.m())));
    }
    check_points(&state, req.n.saturating_mul(points))?;
    blocking(move || {
        let sizes = pipeline::even_split(points, model.m());
        let clouds = pipeline::generate(&model, req.n, &sizes, &Default::default(), &mut rng(req.seed))?;
        Ok(Json(clouds.iter().map(WireCloud::from_cloud).collect()))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/resample", post(resample))
        .route("/sessions/{id}/mix", post(mix))
        .route("/sessions/{id}/interpolate", post(interpolate))
        .route("/sessions/{id}/transform", post(transform))
        .route("/generate", post(generate))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub checkpoint: PathBuf,
    pub addr: SocketAddr,
    pub max_sessions: usize,
}

/// Binds, starts answering (503 until the checkpoint is in), loads the
/// checkpoint in the background and serves until the process ends. A
/// checkpoint that fails to load stops the server with that error.
pub async fn serve(opts: ServeOptions) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = AppState::loading(opts.max_sessions);
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    info!(addr = %listener.local_addr()?, "listening");
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<String>();
    let loader_state = state.clone();
    let path = opts.checkpoint.clone();
    tokio::task::spawn_blocking(move || match PartGen::load(&path) {
        Ok(model) => {
            info!(path = %path.display(), "checkpoint loaded");
            loader_state.set_model(model);
        }
        Err(e) => {
            error!(path = %path.display(), "cannot load checkpoint: {e}");
            let _ = fail_tx.send(format!("cannot load {}: {e}", path.display()));
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let failure2 = failure.clone();
    let shutdown = async move {
        if let Ok(msg) = fail_rx.await {
            *failure2.lock().unwrap() = Some(msg);
        } else {
            std::future::pending::<()>().await;
        }
    };
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    let msg = failure.lock().unwrap().take();
    match msg {
        Some(msg) => Err(msg.into()),
        None => Ok(()),
    }
}
