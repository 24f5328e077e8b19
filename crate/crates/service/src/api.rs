//! The `/v1` HTTP API over a consultation engine.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgconsult_core::consult::{Answer, ConsultationEngine, Session, SessionStatus};
use kgconsult_core::diagnosis::RankedDisease;
use kgconsult_core::graph::EntityId;
use kgconsult_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::store::SessionStore;

pub struct AppState {
    pub engine: ConsultationEngine,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(engine: ConsultationEngine, idle: Duration) -> Self {
        Self {
            engine,
            sessions: SessionStore::new(idle),
        }
    }

    fn named(&self, id: EntityId) -> Named {
        let name = self
            .engine
            .graph
            .entity(id)
            .map(|e| e.name.clone())
            .unwrap_or_default();
        Named { id, name }
    }

    fn diagnosis(&self, session: &Session) -> Option<Vec<DiagnosisEntry>> {
        session.diagnosis.as_ref().map(|ranked| {
            ranked
                .iter()
                .map(
                    |&RankedDisease {
                         disease,
                         probability,
                     }| DiagnosisEntry {
                        disease_id: disease,
                        name: self.named(disease).name,
                        probability,
                    },
                )
                .collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Named {
    pub id: EntityId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEntry {
    pub disease_id: EntityId,
    pub name: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    pub initial_symptoms: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub question: Option<Named>,
    pub diagnosis: Option<Vec<DiagnosisEntry>>,
    pub question_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub symptom_id: u64,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub status: SessionStatus,
    pub question: Option<Named>,
    pub diagnosis: Option<Vec<DiagnosisEntry>>,
    pub question_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: Named,
    pub answer: Answer,
}

/// Everything about a session, as returned by `GET /v1/sessions/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub status: SessionStatus,
    pub initial_symptoms: Vec<Named>,
    pub history: Vec<Turn>,
    pub evidence: Vec<EntityId>,
    pub denied: Vec<EntityId>,
    pub pending_question: Option<Named>,
    pub question_count: usize,
    pub max_questions: usize,
    pub diagnosis: Option<Vec<DiagnosisEntry>>,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "unknown_session",
            format!("no session with id {id}"),
        )
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::InvalidSymptom(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_symptom", message)
            }
            CoreError::NoInitialSymptoms => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
            }
            CoreError::NotPending { .. } => Self::new(StatusCode::CONFLICT, "not_pending", message),
            CoreError::SessionConcluded(_) => {
                Self::new(StatusCode::CONFLICT, "session_concluded", message)
            }
            _ => {
                log::error!("consultation failed: {message}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn list_symptoms(State(st): State<Arc<AppState>>) -> Json<Vec<Named>> {
    Json(
        st.engine
            .graph
            .symptoms()
            .iter()
            .map(|&s| st.named(s))
            .collect(),
    )
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<StartResponse>)> {
    let Json(req) = body?;
    let initial = req
        .initial_symptoms
        .iter()
        .map(|&id| st.engine.symptom(id))
        .collect::<Result<Vec<_>, _>>()?;
    let session = st.engine.start_session(&initial)?;
    let resp = StartResponse {
        session_id: session.id.clone(),
        status: session.status,
        question: session.pending_question.map(|q| st.named(q)),
        diagnosis: st.diagnosis(&session),
        question_count: session.question_count,
    };
    log::debug!(
        "session {} started with {} symptoms",
        session.id,
        initial.len()
    );
    st.sessions.insert(session);
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn answer(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> ApiResult<Json<AnswerResponse>> {
    let Json(req) = body?;
    let symptom = st.engine.symptom(req.symptom_id)?;
    st.sessions
        .with(&id, |session| -> ApiResult<AnswerResponse> {
            st.engine.submit_answer(session, symptom, req.answer)?;
            Ok(AnswerResponse {
                status: session.status,
                question: session.pending_question.map(|q| st.named(q)),
                diagnosis: st.diagnosis(session),
                question_count: session.question_count,
            })
        })
        .ok_or_else(|| ApiError::unknown_session(&id))?
        .map(Json)
}

async fn transcript(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Transcript>> {
    st.sessions
        .with(&id, |s| Transcript {
            session_id: s.id.clone(),
            status: s.status,
            initial_symptoms: s.initial.iter().map(|&e| st.named(e)).collect(),
            history: s
                .history
                .iter()
                .map(|&(q, answer)| Turn {
                    question: st.named(q),
                    answer,
                })
                .collect(),
            evidence: s.evidence.iter().copied().collect(),
            denied: s.denied.iter().copied().collect(),
            pending_question: s.pending_question.map(|q| st.named(q)),
            question_count: s.question_count,
            max_questions: s.max_questions,
            diagnosis: st.diagnosis(s),
            created_at: s.created_at,
        })
        .map(Json)
        .ok_or_else(|| ApiError::unknown_session(&id))
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/symptoms", get(list_symptoms))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(transcript))
        .route("/sessions/{id}/answer", post(answer));
    let app = Router::new().nest("/v1", api).with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Periodically drops idle sessions.
pub fn spawn_evictor(state: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = state.sessions.evict_idle(Instant::now());
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    })
}

/// Serves until ctrl-c.
pub async fn serve(
    state: Arc<AppState>,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let evictor = spawn_evictor(state.clone(), Duration::from_secs(60));
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    evictor.abort();
    Ok(())
}
