//! HTTP+JSON routes over the session manager.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cellpilot::agent::BackendDescriptor;
use cellpilot::eval::{render_json, render_table, run_suite, BackendReport, Thresholds};
use cellpilot::orchestrator::{OrchestratorError, PendingApproval, Verdict};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::sessions::{
    approval_key, parse_approval_key, resolve_suite, CreateError, CreateSession, LiveSession, SessionManager,
};

/// Upper bound on a long-poll wait.
const MAX_WAIT_MS: u64 = 30_000;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let (status, code) = match &e {
            OrchestratorError::UnknownApproval(_) => (StatusCode::NOT_FOUND, "unknown_approval"),
            OrchestratorError::AlreadyResolved(_) => (StatusCode::CONFLICT, "already_resolved"),
            OrchestratorError::EmptyTask => (StatusCode::BAD_REQUEST, "empty_task"),
            OrchestratorError::NoManager => (StatusCode::CONFLICT, "no_manager"),
            OrchestratorError::PlanParseFailure(_) => (StatusCode::UNPROCESSABLE_ENTITY, "plan_parse_failure"),
            OrchestratorError::Setup(_) => (StatusCode::BAD_REQUEST, "invalid_session"),
            OrchestratorError::ScenarioDeadlock { .. } => (StatusCode::CONFLICT, "scenario_deadlock"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<CreateError> for ApiError {
    fn from(e: CreateError) -> Self {
        let code = match e {
            CreateError::Scenario(_) => "unknown_scenario",
            CreateError::Backend(_) => "invalid_backend",
            CreateError::Setup(_) => "invalid_session",
        };
        Self::new(StatusCode::BAD_REQUEST, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/task", post(submit_task))
        .route("/sessions/:id/events", get(events))
        .route("/sessions/:id/state", get(state))
        .route("/sessions/:id/transcript", get(transcript))
        .route("/sessions/:id/approvals", get(approvals))
        .route("/approvals/:id", post(resolve_approval))
        .route("/services", get(services))
        .route("/eval/run", post(eval_run))
        .with_state(manager)
}

pub async fn serve(manager: SessionManager, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(Arc::new(manager))).await
}

fn live(manager: &SessionManager, id: &str) -> ApiResult<Arc<LiveSession>> {
    manager.get(id).ok_or_else(|| ApiError::not_found("session", id))
}

/// Runs `f` on the blocking pool; session locks can be held during inference.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn body<T>(payload: Result<Json<T>, axum::extract::rejection::JsonRejection>) -> ApiResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))
}

async fn create_session(
    State(m): State<Shared>,
    payload: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req = body(payload)?;
    let handle = blocking(move || Ok(m.create(req)?.handle())).await?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(handle).unwrap())))
}

async fn list_sessions(State(m): State<Shared>) -> Json<Value> {
    Json(json!({"sessions": m.list()}))
}

async fn get_session(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(live(&m, &id)?.handle()).unwrap()))
}

#[derive(Deserialize)]
struct TaskBody {
    text: String,
}

async fn submit_task(
    State(m): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<TaskBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let task = body(payload)?;
    let s = live(&m, &id)?;
    blocking(move || {
        let plan = s.session.lock().unwrap().handle_user_task(&task.text);
        s.refresh();
        s.kick();
        Ok(Json(json!({"plan": plan?})))
    })
    .await
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    /// Long-poll: wait up to this long for a record after `since`.
    #[serde(default)]
    wait_ms: u64,
}

async fn events(State(m): State<Shared>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult<Json<Value>> {
    let s = live(&m, &id)?;
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    loop {
        let changed = s.mirror.changed();
        let records = s.mirror.since(q.since);
        let done = s.handle().status != crate::sessions::HandleStatus::Running;
        if !records.is_empty() || done || tokio::time::Instant::now() >= deadline {
            let next = records.last().map_or(q.since, |r| r.seq);
            return Ok(Json(json!({
                "records": records,
                "lines": records.iter().map(|r| r.line()).collect::<Vec<_>>(),
                "next_since": next,
                "status": s.handle().status,
            })));
        }
        let _ = tokio::time::timeout_at(deadline, changed).await;
    }
}

async fn state(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = live(&m, &id)?;
    blocking(move || {
        let session = s.session.lock().unwrap();
        Ok(Json(json!({"handle": s.handle(), "state": session.state()})))
    })
    .await
}

async fn transcript(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<String> {
    let s = live(&m, &id)?;
    blocking(move || Ok(s.session.lock().unwrap().transcript().to_jsonl())).await
}

fn approval_json(session: &str, a: &PendingApproval) -> Value {
    let mut v = serde_json::to_value(a).unwrap();
    v["id"] = json!(approval_key(session, a.id));
    v["session"] = json!(session);
    v["command"] = json!(a.invocation.to_string());
    v
}

async fn approvals(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = live(&m, &id)?;
    blocking(move || {
        let session = s.session.lock().unwrap();
        let list: Vec<Value> = session.approvals().iter().map(|a| approval_json(&s.id, a)).collect();
        Ok(Json(json!({"approvals": list})))
    })
    .await
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: Verdict,
    #[serde(default = "default_actor")]
    actor: String,
}

fn default_actor() -> String {
    "supervisor".into()
}

async fn resolve_approval(
    State(m): State<Shared>,
    Path(key): Path<String>,
    payload: Result<Json<VerdictBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let verdict = body(payload)?;
    let (session_id, local) = parse_approval_key(&key).ok_or_else(|| ApiError::not_found("approval", &key))?;
    let s = live(&m, session_id).map_err(|_| ApiError::not_found("approval", &key))?;
    blocking(move || {
        let mut session = s.session.lock().unwrap();
        let result = session.resolve_approval(local, verdict.verdict, &verdict.actor)?;
        let approval = session.approvals().iter().find(|a| a.id == local).map(|a| approval_json(&s.id, a));
        drop(session);
        s.refresh();
        s.kick();
        Ok(Json(json!({"approval": approval, "result": result})))
    })
    .await
}

async fn services(State(m): State<Shared>) -> ApiResult<Json<Value>> {
    let registry = &m.setup.registry;
    let names: Vec<String> = registry.services().map(|d| d.name.clone()).collect();
    let catalog = registry
        .render_catalog(&names)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let services: Vec<_> = registry.services().collect();
    let aliases: Vec<_> = registry.aliases().iter().collect();
    Ok(Json(json!({"catalog": catalog, "services": services, "aliases": aliases})))
}

#[derive(Deserialize)]
struct EvalBody {
    suite: String,
    backends: Vec<String>,
    #[serde(default)]
    thresholds: Thresholds,
}

async fn eval_run(
    State(m): State<Shared>,
    payload: Result<Json<EvalBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let req = body(payload)?;
    if req.backends.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "at least one backend is required"));
    }
    blocking(move || {
        let suite = resolve_suite(&req.suite).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_suite", e))?;
        let mut reports: Vec<BackendReport> = Vec::new();
        for text in &req.backends {
            let descriptor = BackendDescriptor::parse(text)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_backend", e.to_string()))?;
            let (report, _) = run_suite(&suite, &descriptor, &m.setup)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "eval_failed", e.to_string()))?;
            reports.push(report);
        }
        let violations = req.thresholds.violations(&reports);
        let reports_json: Value = serde_json::from_str(&render_json(&reports)).unwrap();
        Ok(Json(json!({
            "table": render_table(&reports),
            "reports": reports_json,
            "violations": violations,
            "passed": violations.is_empty(),
        })))
    })
    .await
}
