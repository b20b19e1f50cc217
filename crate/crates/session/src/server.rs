//! HTTP API over the store. Every route except `/api/login` needs an
//! `Authorization: Bearer <token>` header.

use std::convert::Infallible;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::broadcast::Receiver;

use crate::auth::{AuthError, Authenticator};
use crate::config::{ConfigError, ServerConfig};
use crate::store::{LiveEvent, SessionSummary, Store, StoreError};
use crate::wire::{parse_frame_lines, ActivityNote, PatientCard};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Error body: `{"error": <kind>, "message": <text>}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, kind) = match &e {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            StoreError::Closed(_) => (StatusCode::CONFLICT, "closed"),
            StoreError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            StoreError::OutOfOrder { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "out-of-order"),
            StoreError::Invalid(_) => (StatusCode::BAD_REQUEST, "bad-request"),
            StoreError::Corrupt { .. } | StoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Random(_) | AuthError::Io(_) | AuthError::Parse { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            }
            _ => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", e.to_string()),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub auth: Arc<Authenticator>,
}

/// The authenticated user and the token they presented.
pub struct Clinician {
    pub user: String,
    pub token: String,
}

fn bearer(parts: &Parts) -> Option<&str> {
    let value = parts.headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

impl FromRequestParts<AppState> for Clinician {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = bearer(parts).ok_or(AuthError::MissingToken)?;
        let user = state.auth.verify(token)?;
        Ok(Clinician {
            user,
            token: token.to_string(),
        })
    }
}

/// Runs a blocking store call off the async workers.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Store) -> Result<T, StoreError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct LoginRequest {
    user: String,
    secret: String,
}

async fn login(State(state): State<AppState>, Json(req): Json<LoginRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    let token = state.auth.login(&req.user, &req.secret)?;
    info!("login: {}", req.user);
    Ok(Json(json!({ "token": token })))
}

async fn logout(State(state): State<AppState>, who: Clinician) -> StatusCode {
    state.auth.revoke(&who.token);
    StatusCode::NO_CONTENT
}

async fn list_patients(State(state): State<AppState>, _: Clinician) -> Json<Vec<PatientCard>> {
    Json(state.store.patients())
}

async fn add_patient(
    State(state): State<AppState>,
    _: Clinician,
    Json(card): Json<PatientCard>,
) -> Result<(StatusCode, Json<PatientCard>), ApiError> {
    let stored = card.clone();
    blocking(&state, move |s| s.add_patient(card)).await?;
    Ok((StatusCode::CREATED, Json(stored)))
}

#[derive(Serialize)]
struct SummaryBody {
    session_id: String,
    patient_id: String,
    t0: u64,
    closed: bool,
    frames: usize,
    activities: usize,
}

impl From<SessionSummary> for SummaryBody {
    fn from(s: SessionSummary) -> Self {
        SummaryBody {
            session_id: s.session_id,
            patient_id: s.patient_id,
            t0: s.t0,
            closed: s.closed,
            frames: s.frames,
            activities: s.activities,
        }
    }
}

async fn get_patient(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let card = state
        .store
        .patient(&id)
        .ok_or_else(|| ApiError::from(StoreError::NotFound(format!("patient {id}"))))?;
    let sessions: Vec<SummaryBody> = state.store.sessions_of(&id).into_iter().map(Into::into).collect();
    Ok(Json(json!({ "card": card, "sessions": sessions })))
}

#[derive(Deserialize)]
struct OpenRequest {
    patient_id: String,
    t0: Option<u64>,
}

async fn open_session(
    State(state): State<AppState>,
    _: Clinician,
    Json(req): Json<OpenRequest>,
) -> Result<(StatusCode, Json<SummaryBody>), ApiError> {
    let t0 = req.t0.unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    });
    let summary = blocking(&state, move |s| {
        let id = s.open_session(&req.patient_id, t0)?;
        s.summary(&id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary.into())))
}

async fn get_session(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
) -> Result<Json<SummaryBody>, ApiError> {
    Ok(Json(state.store.summary(&id)?.into()))
}

/// Body: `F|...` lines, one frame each.
async fn ingest_frames(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
    body: String,
) -> Result<Json<serde_json::Value>, ApiError> {
    let frames = parse_frame_lines(&body)
        .map_err(|(line, msg)| ApiError::bad_request(format!("line {}: {msg}", line + 1)))?;
    let ack = blocking(&state, move |s| s.ingest_frames(&id, &frames)).await?;
    Ok(Json(json!({ "stored": ack.stored, "seq": ack.seq })))
}

async fn add_activity(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
    Json(note): Json<ActivityNote>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let ack = blocking(&state, move |s| s.register_activity(&id, note)).await?;
    Ok(Json(json!({ "stored": ack.stored, "seq": ack.seq })))
}

#[derive(Deserialize)]
struct ExportQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn export(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let range = match (q.from, q.to) {
        (None, None) => None,
        (Some(a), Some(b)) => Some((a, b)),
        _ => return Err(ApiError::bad_request("give both `from` and `to` or neither")),
    };
    let text = state.store.export(&id, range)?;
    Ok(([(CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn close_session(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    blocking(&state, move |s| s.close_session(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct LiveQuery {
    after: Option<u64>,
}

struct LiveStream {
    store: Arc<Store>,
    id: String,
    backlog: std::collections::VecDeque<LiveEvent>,
    rx: Option<Receiver<LiveEvent>>,
    last: Option<u64>,
}

fn to_event((seq, line): LiveEvent) -> Event {
    let kind = if line.starts_with("F|") { "frame" } else { "activity" };
    Event::default().id(seq.to_string()).event(kind).data(line)
}

async fn next_event(mut s: LiveStream) -> Option<(Result<Event, Infallible>, LiveStream)> {
    loop {
        if let Some(ev) = s.backlog.pop_front() {
            s.last = Some(ev.0);
            return Some((Ok(to_event(ev)), s));
        }
        let rx = s.rx.as_mut()?;
        match rx.recv().await {
            Ok(ev) => {
                if s.last.is_some_and(|l| ev.0 <= l) {
                    continue;
                }
                s.last = Some(ev.0);
                return Some((Ok(to_event(ev)), s));
            }
            // Fell behind the channel: catch up from the stored lines.
            Err(RecvError::Lagged(_)) => {
                let (backlog, rx, _) = s.store.subscribe(&s.id, s.last).ok()?;
                s.backlog = backlog.into();
                s.rx = Some(rx);
            }
            Err(RecvError::Closed) => return None,
        }
    }
}

/// Server-sent events, one per stored line with the sequence number as the
/// event id. `Last-Event-ID` or `?after=` resumes after a given id. The
/// stream of a closed session ends once its backlog is sent.
async fn live(
    State(state): State<AppState>,
    _: Clinician,
    Path(id): Path<String>,
    Query(q): Query<LiveQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let after = match headers.get("last-event-id") {
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be a sequence number"))?,
        ),
        None => q.after,
    };
    let (backlog, rx, closed) = state.store.subscribe(&id, after)?;
    let init = LiveStream {
        store: state.store.clone(),
        id,
        backlog: backlog.into(),
        rx: (!closed).then_some(rx),
        last: after,
    };
    Ok(Sse::new(stream::unfold(init, next_event)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/login", post(login))
        .route("/api/logout", post(logout))
        .route("/api/patients", get(list_patients).post(add_patient))
        .route("/api/patients/{id}", get(get_patient))
        .route("/api/sessions", post(open_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/frames", post(ingest_frames))
        .route("/api/sessions/{id}/activities", post(add_activity))
        .route("/api/sessions/{id}/export", get(export))
        .route("/api/sessions/{id}/live", get(live))
        .route("/api/sessions/{id}/close", post(close_session))
        .with_state(state)
}

pub fn state_from_config(cfg: &ServerConfig) -> Result<AppState, ServerError> {
    let auth = Authenticator::load(&cfg.credentials, Duration::from_secs(cfg.token_ttl_secs))?;
    let store = Store::open(&cfg.data_dir)?;
    Ok(AppState {
        store: Arc::new(store),
        auth: Arc::new(auth),
    })
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Binds the configured address and serves until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServerError> {
    let state = state_from_config(&cfg)?;
    let listener = TcpListener::bind(cfg.listen).await?;
    info!("listening on {}", listener.local_addr()?);
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
