//! Session-based HTTP editing service.
//!
//! Routes (all JSON):
//!
//! - `POST /v1/sessions` creates a session from a PNG image and returns the base prediction.
//! - `GET /v1/sessions/{id}` returns the full state including history.
//! - `POST /v1/sessions/{id}/scribbles` applies one editing update.
//! - `POST /v1/sessions/{id}/reset` drops the history.
//! - `DELETE /v1/sessions/{id}` frees the session.
//! - `POST /v1/sessions/{id}/robot_scribbles` returns robot-user scribbles for an uploaded ground truth.
//! - `GET /v1/healthz`, `GET /v1/model`.
//!
//! Operations on one session are serialized by a per-session lock; model
//! weights are shared read-only.

mod session;
pub mod wire;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intercnn_core::evaluation::Editor;
use intercnn_core::grid::{LabelMap, Shape};
use intercnn_core::nets::{Checkpoint, NetKind};
use intercnn_core::dataio::NormalizationStats;
use intercnn_core::robot::{RobotUser, RobotUserConfig, ScribbleSource};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};

pub use session::{EditSession, Interaction};
use wire::{decode_image, decode_mask, encode_mask, parse_json, ApiError, ApiResult, CreateSessionRequest, RobotBody, RobotRequest, ScribbleRequest};

pub const AUTO_CHECKPOINT: &str = "autocnn.ckpt";
pub const INTER_CHECKPOINT: &str = "intercnn.ckpt";
pub const SCRATCH_CHECKPOINT: &str = "uinet.ckpt";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// The base and editing checkpoints served together.
#[derive(Debug)]
pub struct ModelBundle {
    pub auto: Checkpoint,
    pub inter: Checkpoint,
}

impl ModelBundle {
    pub fn new(auto: Checkpoint, inter: Checkpoint) -> anyhow::Result<Self> {
        anyhow::ensure!(auto.kind == NetKind::Auto, "{AUTO_CHECKPOINT} holds a {:?} network", auto.kind);
        anyhow::ensure!(inter.kind == NetKind::Inter, "{INTER_CHECKPOINT} holds a {:?} network", inter.kind);
        anyhow::ensure!(
            auto.network.spec().num_classes == inter.network.spec().num_classes,
            "checkpoints disagree on the class count"
        );
        anyhow::ensure!(auto.patch_size == inter.patch_size, "checkpoints disagree on the patch size");
        Ok(Self { auto, inter })
    }

    /// Load `autocnn.ckpt` and `intercnn.ckpt` from a directory.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let auto = Checkpoint::load(dir.join(AUTO_CHECKPOINT))?;
        let inter = Checkpoint::load(dir.join(INTER_CHECKPOINT))?;
        Self::new(auto, inter)
    }

    pub fn editor(&self) -> Editor<'_> {
        Editor::new(&self.auto.network, &self.inter.network, self.inter.encoding).expect("class counts checked in new")
    }

    pub fn num_classes(&self) -> usize {
        self.auto.network.spec().num_classes
    }

    pub fn patch_size(&self) -> Shape {
        self.auto.patch_size
    }

    pub fn normalization(&self) -> &NormalizationStats {
        &self.auto.normalization
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Sessions idle for longer than this are dropped.
    pub session_ttl: Option<Duration>,
    /// Write every session change to `<dir>/<id>.json` and reload them at startup.
    pub persist_dir: Option<PathBuf>,
}

struct SessionEntry {
    session: Arc<Mutex<EditSession>>,
    touched: Arc<StdMutex<Instant>>,
}

impl SessionEntry {
    fn new(session: EditSession) -> Self {
        Self {
            session: Arc::new(Mutex::new(session)),
            touched: Arc::new(StdMutex::new(Instant::now())),
        }
    }
}

pub struct AppState {
    models: Option<Arc<ModelBundle>>,
    sessions: RwLock<HashMap<String, SessionEntry>>,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(models: Option<ModelBundle>, config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.persist_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    match EditSession::load(&path) {
                        Ok(s) => {
                            sessions.insert(s.id.clone(), SessionEntry::new(s));
                        }
                        Err(e) => tracing::warn!("skipping unreadable session file {}: {e:#}", path.display()),
                    }
                }
            }
        }
        Ok(Arc::new(Self {
            models: models.map(Arc::new),
            sessions: RwLock::new(sessions),
            config,
        }))
    }

    fn models(&self) -> ApiResult<Arc<ModelBundle>> {
        self.models.clone().ok_or_else(ApiError::no_model)
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }

    async fn session(&self, id: &str) -> ApiResult<Arc<Mutex<EditSession>>> {
        self.sweep().await;
        let map = self.sessions.read().await;
        let entry = map.get(id).ok_or_else(|| ApiError::not_found(id))?;
        *entry.touched.lock().expect("touch lock") = Instant::now();
        Ok(entry.session.clone())
    }

    /// Drop sessions idle for longer than the TTL.
    pub async fn sweep(&self) {
        let Some(ttl) = self.config.session_ttl else {
            return;
        };
        let expired: Vec<String> = {
            let map = self.sessions.read().await;
            map.iter()
                .filter(|(_, e)| e.touched.lock().expect("touch lock").elapsed() > ttl)
                .map(|(k, _)| k.clone())
                .collect()
        };
        if expired.is_empty() {
            return;
        }
        let mut map = self.sessions.write().await;
        for id in expired {
            map.remove(&id);
            self.forget(&id);
        }
    }

    fn persist(&self, session: &EditSession) -> ApiResult<()> {
        if let Some(dir) = &self.config.persist_dir {
            session
                .save(dir)
                .map_err(|e| ApiError::internal(format!("persisting session: {e:#}")))?;
        }
        Ok(())
    }

    fn forget(&self, id: &str) {
        if let Some(dir) = &self.config.persist_dir {
            let _ = std::fs::remove_file(dir.join(format!("{id}.json")));
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/model", get(model_info))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/scribbles", post(post_scribbles))
        .route("/v1/sessions/{id}/reset", post(reset_session))
        .route("/v1/sessions/{id}/robot_scribbles", post(robot_scribbles))
        .with_state(state)
}

fn json_bytes(status: StatusCode, bytes: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("response bodies serialize")
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn healthz(State(app): State<Arc<AppState>>) -> Response {
    Json(json!({
        "status": "ok",
        "model_loaded": app.models.is_some(),
        "sessions": app.session_count().await,
    }))
    .into_response()
}

async fn model_info(State(app): State<Arc<AppState>>) -> ApiResult<Response> {
    let m = app.models()?;
    let describe = |ck: &Checkpoint| {
        let spec = ck.network.spec();
        json!({
            "kind": ck.kind,
            "base_channels": spec.base_channels,
            "in_channels": spec.in_channels,
            "depth": spec.depth,
            "parameters": ck.network.num_parameters(),
            "step": ck.network.step,
        })
    };
    let c = m.num_classes();
    Ok(Json(json!({
        "num_classes": c,
        "class_ids": (0..c).collect::<Vec<_>>(),
        "sentinel": c,
        "patch_size": m.patch_size(),
        "encoding": m.inter.encoding,
        "normalization": m.normalization(),
        "auto": describe(&m.auto),
        "inter": describe(&m.inter),
    }))
    .into_response())
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let models = app.models()?;
    let req: CreateSessionRequest = parse_json(&body)?;
    let raw = decode_image(&req.image_png)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = blocking(move || {
        EditSession::create(id, &raw, &models).map_err(|e| ApiError::bad_image(format!("cannot process image: {e}")))
    })
    .await?;
    app.persist(&session)?;
    let bytes = to_json(&session.prediction_body());
    app.sessions
        .write()
        .await
        .insert(session.id.clone(), SessionEntry::new(session));
    Ok(json_bytes(StatusCode::CREATED, bytes))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let session = app.session(&id).await?;
    let guard = session.lock().await;
    Ok(Json(guard.session_body()).into_response())
}

async fn post_scribbles(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let models = app.models()?;
    let session = app.session(&id).await?;
    let req: ScribbleRequest = parse_json(&body)?;
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or(req.idempotency_key);
    let guard = session.lock_owned().await;
    if let Some(stored) = key.as_ref().and_then(|k| guard.responses.get(k)) {
        return Ok(json_bytes(StatusCode::OK, stored.clone()));
    }
    let (shape, values) = decode_mask("scribbles_png", &req.scribbles_png).map_err(ApiError::bad_scribbles)?;
    if shape != guard.original_shape() {
        return Err(ApiError::bad_scribbles(format!(
            "scribble mask is {shape}, session image is {}",
            guard.original_shape()
        )));
    }
    let c = models.num_classes();
    if let Some(bad) = values.iter().find(|&&v| v as usize > c) {
        return Err(ApiError::bad_scribbles(format!(
            "scribble value {bad} outside [0, {c}] (class ids plus sentinel {c})"
        )));
    }
    let (guard, bytes) = blocking(move || {
        let mut guard = guard;
        let scribbles = guard
            .fit_scribbles(&values, c)
            .map_err(|e| ApiError::bad_scribbles(e.to_string()))?;
        guard
            .apply(&models.editor(), scribbles)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let bytes = to_json(&guard.prediction_body());
        if let Some(k) = key {
            guard.responses.insert(k, bytes.clone());
        }
        Ok((guard, bytes))
    })
    .await?;
    app.persist(&guard)?;
    Ok(json_bytes(StatusCode::OK, bytes))
}

async fn reset_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let session = app.session(&id).await?;
    let mut guard = session.lock().await;
    guard.reset();
    app.persist(&guard)?;
    Ok(Json(guard.session_body()).into_response())
}

async fn delete_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let removed = app.sessions.write().await.remove(&id);
    match removed {
        Some(entry) => {
            // Wait for any in-flight update before reporting success.
            drop(entry.session.lock().await);
            app.forget(&id);
            Ok(Json(json!({ "deleted": id })).into_response())
        }
        None => Err(ApiError::not_found(&id)),
    }
}

async fn robot_scribbles(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let models = app.models()?;
    let session = app.session(&id).await?;
    let req: RobotRequest = parse_json(&body)?;
    let guard = session.lock().await;
    let (shape, values) = decode_mask("ground_truth_png", &req.ground_truth_png).map_err(ApiError::bad_request)?;
    if shape != guard.original_shape() {
        return Err(ApiError::bad_request(format!(
            "ground truth is {shape}, session image is {}",
            guard.original_shape()
        )));
    }
    let c = models.num_classes();
    let gt = LabelMap::new(shape.height, shape.width, c, values).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let prediction = guard.client_labels(guard.current());
    let mut robot = RobotUser::new(RobotUserConfig {
        rng_seed: req.seed,
        ..Default::default()
    })
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let mask = robot
        .scribble(&prediction, &gt)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(RobotBody {
        scribbles_png: encode_mask(shape, mask.marks()),
        marked_pixels: mask.marked_count(),
    })
    .into_response())
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    if state.config.session_ttl.is_some() {
        let sweeper = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(30));
            loop {
                tick.tick().await;
                sweeper.sweep().await;
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
