//! HTTP service that hands out simulation test sessions phase by phase and
//! records every answer.
//!
//! Endpoints, all under `/api`:
//!
//! | method | path | auth |
//! |---|---|---|
//! | POST | `/api/session` | token |
//! | GET | `/api/session/{id}` | token |
//! | GET | `/api/session/{id}/current` | session id |
//! | POST | `/api/session/{id}/response` | session id |
//! | POST | `/api/session/{id}/advance` | session id |
//! | GET | `/api/export` | token |
//!
//! The token is sent as `Authorization: Bearer <token>`.

pub mod config;
pub mod session;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use simbench_core::data::Domain;
use simbench_core::explain::Method;
use simbench_core::par::Parallelism;
use simbench_core::testbench::{PhaseKind, ResponseRecord, TestKind, DEFAULT_PREDICTION_ITEMS};
use simbench_core::workbench::{Workbench, WorkbenchError, DEFAULT_SEED};
use thiserror::Error;
use tokio::sync::{Mutex, RwLock};

pub use config::{ConfigError, ServiceConfig};
use session::{Answer, Refusal, SessionState};
use store::{Event, Store, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loading {domain} models from {dir}: {source}")]
    Models {
        domain: Domain,
        dir: PathBuf,
        #[source]
        source: WorkbenchError,
    },
    #[error("{dir} holds {found} models but is configured for {domain}")]
    WrongDomain { domain: Domain, dir: PathBuf, found: Domain },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}

pub struct AppState {
    token: String,
    workbenches: BTreeMap<Domain, Arc<Workbench>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    store: Store,
}

impl AppState {
    /// Loads the configured models and replays stored sessions.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut workbenches = BTreeMap::new();
        for (&domain, dir) in &config.models {
            let wb = Workbench::open(dir, Parallelism::Parallel).map_err(|source| ServiceError::Models {
                domain,
                dir: dir.clone(),
                source,
            })?;
            if wb.domain() != domain {
                return Err(ServiceError::WrongDomain {
                    domain,
                    dir: dir.clone(),
                    found: wb.domain(),
                });
            }
            workbenches.insert(domain, Arc::new(wb));
        }
        Self::with_workbenches(config, workbenches)
    }

    pub fn with_workbenches(
        config: &ServiceConfig,
        workbenches: BTreeMap<Domain, Arc<Workbench>>,
    ) -> Result<Self, ServiceError> {
        let (store, states) = Store::open(&config.data_dir)?;
        let sessions = states
            .into_iter()
            .map(|s| (s.session.id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            token: config.token.clone(),
            workbenches,
            sessions: RwLock::new(sessions),
            store,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Snapshot of one session's state.
    pub async fn session_state(&self, id: &str) -> Option<SessionState> {
        let s = self.sessions.read().await.get(id).cloned()?;
        let state = s.lock().await.clone();
        Some(state)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/current", get(current))
        .route("/api/session/{id}/response", post(respond))
        .route("/api/session/{id}/advance", post(advance))
        .route("/api/export", get(export))
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.bind, config.port);
    let state = Arc::new(tokio::task::block_in_place(|| AppState::load(&config))?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
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

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<Refusal> for ApiError {
    fn from(r: Refusal) -> Self {
        let status = match r {
            Refusal::Completed => StatusCode::GONE,
            Refusal::Duplicate(_) | Refusal::Conflict(_) => StatusCode::CONFLICT,
            Refusal::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, r.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    let want = state.token.as_bytes();
    let same = given.len() == want.len() && given.bytes().zip(want).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
    if same {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong experimenter token"))
    }
}

async fn lookup(state: &AppState, id: &str) -> Result<Arc<Mutex<SessionState>>, ApiError> {
    state.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found(id))
}

fn default_n() -> usize {
    DEFAULT_PREDICTION_ITEMS
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub method: Method,
    pub domain: Domain,
    pub kind: TestKind,
    /// Prediction items; forward tests add the standard learning set.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Recorded with every response; defaults to the session id.
    #[serde(default)]
    pub user: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub kind: TestKind,
    pub method: Method,
    pub domain: Domain,
    pub items: usize,
    pub retries: usize,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    authorize(&state, &headers)?;
    if req.n == 0 || req.n % 4 != 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("n = {} must be a positive multiple of 4", req.n),
        ));
    }
    let wb = state.workbenches.get(&req.domain).cloned().ok_or_else(|| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("no {} models are loaded", req.domain))
    })?;
    let id = format!("{:032x}", rand::random::<u128>());
    let session = {
        let (id, req) = (id.clone(), req.clone());
        tokio::task::spawn_blocking(move || wb.bench().make_session(&id, req.method, req.kind, req.n, req.seed))
            .await
            .map_err(ApiError::internal)?
            .map_err(|e| ApiError::internal(format!("session generation failed: {e}")))?
    };
    let created = Created {
        id: id.clone(),
        kind: session.kind,
        method: session.method,
        domain: session.domain,
        items: session.items.len(),
        retries: session.retries,
    };
    let user = req.user.unwrap_or_else(|| id.clone());
    let s = SessionState::new(session, user, now_ms());
    state.store.create(&s).map_err(ApiError::internal)?;
    state.sessions.write().await.insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let s = lookup(&state, &id).await?;
    let s = s.lock().await;
    Ok(Json(&s.session).into_response())
}

async fn current(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = lookup(&state, &id).await?;
    let s = s.lock().await;
    if s.completed {
        return Err(Refusal::Completed.into());
    }
    Ok(Json(s.view()).into_response())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: PhaseKind,
    pub phase_index: usize,
    pub completed: bool,
}

fn progress(s: &SessionState) -> Progress {
    Progress {
        phase: s.session.phases[s.phase].kind,
        phase_index: s.phase,
        completed: s.completed,
    }
}

async fn respond(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(answer): Json<Answer>,
) -> Result<Json<Progress>, ApiError> {
    let s = lookup(&state, &id).await?;
    let mut s = s.lock().await;
    let mut next = s.clone();
    let record = next.respond(&answer, now_ms())?;
    state.store.append(&id, &Event::Response { record }).map_err(ApiError::internal)?;
    *s = next;
    Ok(Json(progress(&s)))
}

async fn advance(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Progress>, ApiError> {
    let s = lookup(&state, &id).await?;
    let mut s = s.lock().await;
    let from = s.phase;
    let mut next = s.clone();
    next.advance()?;
    state.store.append(&id, &Event::Advance { from }).map_err(ApiError::internal)?;
    *s = next;
    Ok(Json(progress(&s)))
}

/// Every recorded response as JSON lines, ordered by server timestamp, then
/// session id, then arrival.
async fn export(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let handles: Vec<Arc<Mutex<SessionState>>> = state.sessions.read().await.values().cloned().collect();
    let mut records: Vec<(usize, ResponseRecord)> = Vec::new();
    for h in handles {
        records.extend(h.lock().await.responses.iter().cloned().enumerate());
    }
    records.sort_by(|(i, a), (j, b)| {
        a.timestamp_ms
            .cmp(&b.timestamp_ms)
            .then_with(|| a.session_id.cmp(&b.session_id))
            .then(i.cmp(j))
    });
    let mut body = String::new();
    for (_, r) in &records {
        body.push_str(&serde_json::to_string(r).expect("records serialize"));
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
