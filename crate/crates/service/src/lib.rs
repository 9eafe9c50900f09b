//! HTTP/JSON front end for interactive sessions.
//!
//! Sessions live in memory, one lock each, so requests on distinct sessions
//! run concurrently while requests on the same session are serialized.
//! With a persistence directory every session is also written as a
//! replayable document after each change and restored on startup.

mod error;
mod wire;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use prefalign::model::ModelParams;
use prefalign::rng::derive_seed;
use prefalign::session::{ImageSource, SessionConfig, SessionDoc, SessionState};
use serde::Deserialize;

pub use error::ApiError;
pub use wire::{CreateSession, InlineImage, PersistedSession, SelectionRequest, SessionResource};

/// Phantoms addressable as `phantom-0000`, `phantom-0001`, ...; image `i`
/// matches the dataset generator's image `i` for the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data_seed: u64,
}

impl Default for Catalog {
    fn default() -> Self {
        Self { count: 200, height: 64, width: 64, data_seed: 7 }
    }
}

impl Catalog {
    pub fn resolve(&self, image_id: &str) -> Result<ImageSource, ApiError> {
        let unknown = || ApiError::NotFound(format!("unknown image_id {image_id:?}"));
        let index: usize = image_id
            .strip_prefix("phantom-")
            .filter(|digits| digits.len() == 4)
            .and_then(|digits| digits.parse().ok())
            .ok_or_else(unknown)?;
        if index >= self.count {
            return Err(unknown());
        }
        Ok(ImageSource::Phantom {
            seed: derive_seed(self.data_seed, &[index as u64]),
            height: self.height,
            width: self.width,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Sequential session ids and seed 0 unless the request sets one.
    pub deterministic: bool,
    pub persist: Option<PathBuf>,
    pub catalog: Catalog,
    /// Session defaults; shape fields are overwritten from the model.
    pub defaults: SessionConfig,
}

struct Entry {
    image_id: Option<String>,
    state: SessionState,
}

pub struct AppState {
    model: ModelParams,
    model_hash: String,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: ModelParams, mut config: ServiceConfig) -> prefalign::Result<Self> {
        model.validate()?;
        config.defaults.components = model.components();
        config.defaults.latent_dim = model.latent_dim();
        config.defaults.embed_dim = model.embed_dim();
        config.defaults.validate()?;
        Ok(Self {
            model_hash: model.content_hash(),
            model,
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    /// Replays every persisted session; returns how many were restored.
    pub fn restore(&self) -> prefalign::Result<usize> {
        let Some(dir) = &self.config.persist else { return Ok(0) };
        std::fs::create_dir_all(dir)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut restored = 0;
        for path in paths {
            let doc: PersistedSession = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            let mut state = doc.doc.replay(&self.model)?;
            if state.status == prefalign::session::SessionStatus::Active {
                state.step_segment(&self.model)?;
            }
            if let Some(n) = doc.session_id.strip_prefix("sess-").and_then(|n| n.parse::<u64>().ok()) {
                self.next_id.fetch_max(n + 1, Ordering::SeqCst);
            }
            let entry = Entry { image_id: doc.image_id, state };
            self.sessions.write().expect("session map poisoned").insert(doc.session_id, Arc::new(Mutex::new(entry)));
            restored += 1;
        }
        Ok(restored)
    }

    fn new_id(&self) -> String {
        if self.config.deterministic {
            format!("sess-{:06}", self.next_id.fetch_add(1, Ordering::SeqCst))
        } else {
            format!("sess-{}", uuid::Uuid::new_v4().simple())
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn persist(&self, id: &str, entry: &Entry) -> Result<(), ApiError> {
        let Some(dir) = &self.config.persist else { return Ok(()) };
        let doc = PersistedSession { session_id: id.to_string(), image_id: entry.image_id.clone(), doc: entry.state.to_doc(&self.model_hash) };
        write_atomic(&dir.join(format!("{id}.json")), &serde_json::to_vec_pretty(&doc).map_err(|e| ApiError::Internal(e.to_string()))?)
    }

    fn session_config(&self, overrides: Option<&serde_json::Value>) -> Result<SessionConfig, ApiError> {
        let mut merged = serde_json::to_value(&self.config.defaults).map_err(|e| ApiError::Internal(e.to_string()))?;
        let mut seeded = false;
        if let Some(over) = overrides {
            let over = over.as_object().ok_or_else(|| ApiError::BadRequest("config must be a JSON object".into()))?;
            let target = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in over {
                if !target.contains_key(k) {
                    return Err(ApiError::BadRequest(format!("unknown config field {k:?}")));
                }
                seeded |= k == "seed";
                target.insert(k.clone(), v.clone());
            }
        }
        let mut config: SessionConfig =
            serde_json::from_value(merged).map_err(|e| ApiError::BadRequest(format!("invalid config: {e}")))?;
        if !seeded && !self.config.deterministic {
            config.seed = rand_seed();
        }
        config.validate()?;
        Ok(config)
    }
}

fn rand_seed() -> u64 {
    let bytes = *uuid::Uuid::new_v4().as_bytes();
    u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| ApiError::Internal(format!("persisting {}: {e}", path.display())))
}

#[derive(Debug, Default, Deserialize)]
pub struct ViewQuery {
    /// `?png=1` adds base64 PNG renderings of the masks.
    #[serde(default)]
    pub png: Option<u8>,
}

impl ViewQuery {
    fn png(&self) -> bool {
        self.png.unwrap_or(0) != 0
    }
}

/// Runs `f` on the session under its lock, off the async executor.
async fn with_session<T: Send + 'static>(
    app: Arc<AppState>,
    id: String,
    f: impl FnOnce(&AppState, &str, &mut Entry) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let session = app.session(&id)?;
    tokio::task::spawn_blocking(move || {
        let mut entry = session.lock().map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        f(&app, &id, &mut entry)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Query(q): Query<ViewQuery>,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<SessionResource>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let (image_id, source) = match (&req.image_id, &req.image) {
        (Some(id), None) => (Some(id.clone()), app.config.catalog.resolve(id)?),
        (None, Some(img)) => (None, img.to_source()),
        _ => return Err(ApiError::BadRequest("give exactly one of image_id and image".into())),
    };
    let config = app.session_config(req.config.as_ref())?;
    let app2 = app.clone();
    let resource = tokio::task::spawn_blocking(move || -> Result<SessionResource, ApiError> {
        let mut state = SessionState::start(config, source, None, &app2.model)?;
        state.step_segment(&app2.model)?;
        let id = app2.new_id();
        let entry = Entry { image_id, state };
        app2.persist(&id, &entry)?;
        let resource = SessionResource::build(&id, entry.image_id.as_deref(), &entry.state, &app2.model_hash, q.png())?;
        app2.sessions.write().expect("session map poisoned").insert(id, Arc::new(Mutex::new(entry)));
        Ok(resource)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(resource)))
}

async fn select(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ViewQuery>,
    body: Result<Json<SelectionRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<SessionResource>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    with_session(app, id, move |app, id, entry| {
        entry.state.apply_selection(req.cluster_id, &app.model)?;
        if entry.state.status == prefalign::session::SessionStatus::Active {
            entry.state.step_segment(&app.model)?;
        }
        app.persist(id, entry)?;
        SessionResource::build(id, entry.image_id.as_deref(), &entry.state, &app.model_hash, q.png())
    })
    .await
    .map(Json)
}

async fn approve(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ViewQuery>,
) -> Result<Json<SessionResource>, ApiError> {
    with_session(app, id, move |app, id, entry| {
        entry.state.approve()?;
        app.persist(id, entry)?;
        SessionResource::build(id, entry.image_id.as_deref(), &entry.state, &app.model_hash, q.png())
    })
    .await
    .map(Json)
}

async fn snapshot(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ViewQuery>,
) -> Result<Json<SessionResource>, ApiError> {
    with_session(app, id, move |app, id, entry| {
        SessionResource::build(id, entry.image_id.as_deref(), &entry.state, &app.model_hash, q.png())
    })
    .await
    .map(Json)
}

async fn history(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionDoc>, ApiError> {
    with_session(app, id, |app, _, entry| Ok(entry.state.to_doc(&app.model_hash))).await.map(Json)
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such route".into())
}

/// All API routes; `static_dir`, when given, is served for everything else.
pub fn router(app: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(snapshot))
        .route("/sessions/{id}/selection", post(select))
        .route("/sessions/{id}/approve", post(approve))
        .route("/sessions/{id}/history", get(history))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}
