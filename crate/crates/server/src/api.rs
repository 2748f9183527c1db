//! `/api/v1` routes.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use tutor_core::content::{Activity, ToolId, ToolTrigger};
use tutor_core::diagnosis::{DiagnosisAttemptState, DiagnosisError, DiagnosisService};
use tutor_core::engine::{session_id_for, EngineError, ExpectationStatus, Lifecycle, SessionState};
use tutor_core::events::{parse_ts, Component, DialogueEntry, EventFilter, EventKind, NewEvent};
use tutor_core::feedback::{feedback_stats, record_feedback, FeedbackError, Vote};
use tutor_core::gateway::LlmGateway;
use tutor_core::pipeline::{FacilitatorAction, FacilitatorDecision, ToolDirective, ToolResultPayload};
use tutor_core::turn::{review_turn, run_turn, TurnError, TurnResult};
use tutor_core::{ActivityEngine, Agents, PipelineConfig, PromptSet, UserMessage};

use crate::auth::{AuthError, AuthStore, Principal};

pub struct AppState {
    pub engine: Arc<ActivityEngine>,
    pub diagnosis: DiagnosisService,
    pub gateway: Arc<dyn LlmGateway>,
    pub prompts: PromptSet,
    pub config: PipelineConfig,
    pub auth: AuthStore,
    pub asset_dir: Option<PathBuf>,
    in_flight: Mutex<HashSet<String>>,
}

impl AppState {
    pub fn new(
        engine: Arc<ActivityEngine>,
        gateway: Arc<dyn LlmGateway>,
        prompts: PromptSet,
        config: PipelineConfig,
        auth: AuthStore,
        asset_dir: Option<PathBuf>,
    ) -> Self {
        AppState {
            diagnosis: DiagnosisService::new(engine.clone()),
            engine,
            gateway,
            prompts,
            config,
            auth,
            asset_dir,
            in_flight: Mutex::new(HashSet::new()),
        }
    }

    fn now(&self) -> i64 {
        self.engine.store().now_ms()
    }

    fn audit(&self, user: &str, action: &str) -> Result<u64, ApiError> {
        self
            .engine
            .store()
            .append(NewEvent::new(EventKind::AuthEvent, user, json!({ "action": action })))
            .map_err(ApiError::internal)
    }
}

/// Held while a turn runs; a second turn on the same session gets 409.
struct TurnSlot<'a> {
    state: &'a AppState,
    session_id: String,
}

impl<'a> TurnSlot<'a> {
    fn acquire(state: &'a AppState, session_id: &str) -> Option<TurnSlot<'a>> {
        state
            .in_flight
            .lock()
            .unwrap()
            .insert(session_id.to_string())
            .then(|| TurnSlot { state, session_id: session_id.to_string() })
    }
}

impl Drop for TurnSlot<'_> {
    fn drop(&mut self) {
        self.state.in_flight.lock().unwrap().remove(&self.session_id);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "internal error");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let (status, code) = match &e {
            AuthError::UserExists(_) => (StatusCode::CONFLICT, "user_exists"),
            AuthError::BadCredentials => (StatusCode::UNAUTHORIZED, "bad_credentials"),
            AuthError::Unauthenticated => (StatusCode::UNAUTHORIZED, "unauthenticated"),
            AuthError::BadUsername | AuthError::EmptyPassword => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            AuthError::Storage(_) => return ApiError::internal(e),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::ActivityNotFound(_) | EngineError::SessionNotFound(_) => ApiError::not_found(e.to_string()),
            EngineError::ActivityLocked(_) => ApiError::new(StatusCode::FORBIDDEN, "locked", e.to_string()),
            EngineError::Conflict(_) | EngineError::SessionCompleted(_) => {
                ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
            }
            EngineError::IllegalTransition { .. } | EngineError::NotCompleted => {
                ApiError::new(StatusCode::CONFLICT, "illegal_transition", e.to_string())
            }
            EngineError::Store(_) => ApiError::internal(e),
        }
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        match e {
            TurnError::SessionNotFound(s) => ApiError::not_found(format!("session {s} not started")),
            TurnError::SessionCompleted(s) => ApiError::new(StatusCode::CONFLICT, "completed", format!("session {s} is completed")),
            TurnError::InvalidMessage(m) => ApiError::unprocessable(m),
            TurnError::Gateway { step, source } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "gateway", format!("{step} failed: {source}; retry the message"))
            }
            TurnError::Engine(e) => e.into(),
        }
    }
}

impl From<DiagnosisError> for ApiError {
    fn from(e: DiagnosisError) -> Self {
        match &e {
            DiagnosisError::Locked(_) => ApiError::new(StatusCode::FORBIDDEN, "locked", e.to_string()),
            DiagnosisError::NotFound(_) => ApiError::not_found(e.to_string()),
            DiagnosisError::UnknownQuestion(_) | DiagnosisError::UnknownOption { .. } | DiagnosisError::CursorOutOfRange(_) => {
                ApiError::unprocessable(e.to_string())
            }
            DiagnosisError::AttemptFinished | DiagnosisError::NotFinished => {
                ApiError::new(StatusCode::CONFLICT, "attempt_state", e.to_string())
            }
            DiagnosisError::Store(_) => ApiError::internal(e),
        }
    }
}

impl From<FeedbackError> for ApiError {
    fn from(e: FeedbackError) -> Self {
        match &e {
            FeedbackError::TargetNotFound(_) => ApiError::not_found(e.to_string()),
            FeedbackError::NotRatable(_) => ApiError::unprocessable(e.to_string()),
            FeedbackError::Store(_) => ApiError::internal(e),
        }
    }
}

/// The caller, from `Authorization: Bearer <token>`.
pub struct Auth(pub Principal);

impl FromRequestParts<Arc<AppState>> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(AuthError::Unauthenticated)?;
        Ok(Auth(state.auth.authenticate(token.trim(), state.now())?))
    }
}

fn require_admin(p: &Principal) -> Result<(), ApiError> {
    if p.admin {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "admin only"))
    }
}

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/auth/register", post(register))
        .route("/auth/login", post(login))
        .route("/auth/logout", post(logout))
        .route("/progress", get(progress))
        .route("/activity/{id}", get(activity))
        .route("/activity/{id}/start", post(start))
        .route("/activity/{id}/message", post(message))
        .route("/activity/{id}/tool-event", post(tool_event))
        .route("/activity/{id}/state", get(session_state))
        .route("/activity/{id}/dialogue", get(dialogue))
        .route("/notebook", get(notebook).put(save_notebook))
        .route("/feedback", post(feedback))
        .route("/feedback/stats", get(stats))
        .route("/diagnosis/{id}", post(open_diagnosis))
        .route("/diagnosis/{id}/select", post(select_option))
        .route("/diagnosis/{id}/cursor", post(move_cursor))
        .route("/diagnosis/{id}/finish", post(finish_diagnosis))
        .route("/diagnosis/{id}/retake", post(retake_diagnosis))
        .route("/admin/export", get(export))
        .route("/admin/session/{session_id}/skip", post(admin_skip));
    let mut app = Router::new().nest("/api/v1", api);
    if let Some(dir) = &state.asset_dir {
        app = app.nest_service("/assets", ServeDir::new(dir));
    }
    app.with_state(state)
}

#[derive(Deserialize)]
struct Credentials {
    username: String,
    password: String,
}

async fn register(State(s): Shared, Json(c): Json<Credentials>) -> Result<impl IntoResponse, ApiError> {
    s.auth.register(&c.username, &c.password)?;
    s.audit(&c.username, "register")?;
    Ok((StatusCode::CREATED, Json(json!({ "user_id": c.username }))))
}

async fn login(State(s): Shared, Json(c): Json<Credentials>) -> Result<impl IntoResponse, ApiError> {
    match s.auth.login(&c.username, &c.password, s.now()) {
        Ok(t) => {
            s.audit(&c.username, "login")?;
            Ok(Json(t))
        }
        Err(e) => {
            s.audit(&c.username, "login_failed")?;
            Err(e.into())
        }
    }
}

async fn logout(State(s): Shared, Auth(p): Auth, parts: axum::http::HeaderMap) -> Result<StatusCode, ApiError> {
    if let Some(t) = parts.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer ")) {
        s.auth.logout(t.trim());
    }
    s.audit(&p.user_id, "logout")?;
    Ok(StatusCode::NO_CONTENT)
}

async fn progress(State(s): Shared, Auth(p): Auth) -> impl IntoResponse {
    Json(s.engine.progress_view(&p.user_id))
}

fn asset_url(r: &str) -> String {
    format!("/assets/{r}")
}

#[derive(Serialize)]
struct StageView {
    id: String,
    expectation_count: usize,
    tools: Vec<ToolBindingView>,
}

#[derive(Serialize)]
struct ToolBindingView {
    tool_id: ToolId,
    trigger: ToolTrigger,
}

fn activity_json(a: &Activity) -> Value {
    let stages: Vec<StageView> = a
        .stages
        .iter()
        .map(|st| StageView {
            id: st.id.clone(),
            expectation_count: st.expectations.len(),
            tools: st.tool_bindings.iter().map(|b| ToolBindingView { tool_id: b.tool_id, trigger: b.trigger }).collect(),
        })
        .collect();
    json!({
        "id": a.id,
        "title": a.title,
        "question_text": a.question_text,
        "image_refs": a.image_refs,
        "image_urls": a.image_refs.iter().map(|r| asset_url(r)).collect::<Vec<_>>(),
        "stages": stages,
    })
}

fn lookup_activity<'a>(s: &'a AppState, id: &str) -> Result<&'a Activity, ApiError> {
    s.engine.pack().get_activity(id).map_err(|_| ApiError::not_found(format!("activity {id} not found")))
}

async fn activity(State(s): Shared, Auth(_): Auth, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(activity_json(lookup_activity(&s, &id)?)))
}

/// Session state as the client sees it: no internal counters.
#[derive(Serialize)]
struct StateView {
    session_id: String,
    activity_id: String,
    stage_index: usize,
    stage_count: usize,
    expectation_status: BTreeMap<String, ExpectationStatus>,
    lifecycle: Lifecycle,
}

fn state_view(st: &SessionState, a: &Activity) -> StateView {
    StateView {
        session_id: st.session_id.clone(),
        activity_id: st.activity_id.clone(),
        stage_index: st.stage_index,
        stage_count: a.stages.len(),
        expectation_status: st.expectation_status.clone(),
        lifecycle: st.lifecycle,
    }
}

async fn start(State(s): Shared, Auth(p): Auth, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let st = s.engine.start_or_resume(&p.user_id, &id)?;
    let a = lookup_activity(&s, &id)?;
    let auto: Vec<ToolDirective> = if st.is_completed() {
        vec![]
    } else {
        st.current_stage(a)
            .tool_bindings
            .iter()
            .filter(|b| b.trigger == ToolTrigger::AutoOnEnter)
            .map(|b| ToolDirective { tool_id: b.tool_id, trigger_reason: "auto_on_enter".into() })
            .collect()
    };
    let summary = st.is_completed().then(|| tutor_core::engine::completion_summary(&st, a)).transpose()?;
    Ok(Json(json!({
        "state": state_view(&st, a),
        "activity": activity_json(a),
        "tool_directives": auto,
        "summary": summary,
    })))
}

#[derive(Serialize)]
struct TurnView {
    turn_id: String,
    reply: String,
    tool_directives: Vec<ToolDirective>,
    image_refs: Vec<String>,
    image_urls: Vec<String>,
    fallback: bool,
    decision: FacilitatorDecision,
    summary: Option<String>,
    state: StateView,
    event_ids: Vec<u64>,
    /// Event id of each bubble, for votes.
    reply_event_id: Option<u64>,
    decision_event_id: Option<u64>,
}

fn turn_view(s: &AppState, r: TurnResult) -> Result<TurnView, ApiError> {
    let a = lookup_activity(s, &r.state.activity_id)?;
    let events: Vec<_> = r.event_ids.iter().filter_map(|id| s.engine.store().get(*id)).collect();
    let bubble = |c: Component| {
        events
            .iter()
            .find(|e| e.kind == EventKind::SystemMessage && e.component == Some(c))
            .map(|e| e.event_id)
    };
    Ok(TurnView {
        turn_id: r.turn_id,
        image_urls: r.reply.image_refs.iter().map(|x| asset_url(x)).collect(),
        reply_event_id: bubble(Component::Responder).or_else(|| bubble(Component::Facilitator)),
        decision_event_id: bubble(Component::Facilitator),
        reply: r.reply.text,
        tool_directives: r.reply.tool_directives,
        image_refs: r.reply.image_refs,
        fallback: r.reply.fallback,
        decision: r.decision,
        summary: r.summary,
        state: state_view(&r.state, a),
        event_ids: r.event_ids,
    })
}

/// Runs a turn (or a review turn once completed) on a blocking thread while
/// holding the session's slot.
async fn drive_turn(s: Arc<AppState>, user: &str, activity_id: &str, msg: UserMessage) -> Result<Json<TurnView>, ApiError> {
    lookup_activity(&s, activity_id)?;
    let session_id = session_id_for(user, activity_id);
    let st = s
        .engine
        .session(&session_id)
        .ok_or_else(|| ApiError::not_found(format!("activity {activity_id} has not been started")))?;
    let slot = TurnSlot::acquire(&s, &session_id)
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "turn_in_flight", "a message for this session is still being processed"))?;
    let worker = s.clone();
    let sid = session_id.clone();
    let result = tokio::task::spawn_blocking(move || {
        let agents = Agents::new(worker.gateway.as_ref(), &worker.prompts, &worker.config);
        let msg = UserMessage { session_id: sid.clone(), ..msg };
        if st.is_completed() {
            review_turn(&worker.engine, agents, &sid, &msg)
        } else {
            run_turn(&worker.engine, agents, &sid, &msg)
        }
    })
    .await
    .map_err(ApiError::internal)?;
    drop(slot);
    Ok(Json(turn_view(&s, result?)?))
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
    #[serde(default)]
    client_timestamp: Option<i64>,
}

async fn message(
    State(s): Shared,
    Auth(p): Auth,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Json<TurnView>, ApiError> {
    let msg = UserMessage {
        session_id: String::new(),
        text: body.text,
        attached_tool_result: None,
        client_timestamp: body.client_timestamp,
    };
    drive_turn(s, &p.user_id, &id, msg).await
}

#[derive(Deserialize)]
struct ToolEventBody {
    tool_id: String,
    #[serde(default)]
    data: Value,
    #[serde(default)]
    text: Option<String>,
}

fn notebook_event(user: &str, session: Option<&str>, text: &str) -> NewEvent {
    let ev = NewEvent::new(
        EventKind::ToolEvent,
        user,
        json!({ "tool_id": ToolId::Notebook, "source": "user", "data": { "text": text } }),
    )
    .component(Component::Tools);
    match session {
        Some(s) => ev.session(s),
        None => ev,
    }
}

async fn tool_event(
    State(s): Shared,
    Auth(p): Auth,
    Path(id): Path<String>,
    Json(body): Json<ToolEventBody>,
) -> Result<Response, ApiError> {
    let a = lookup_activity(&s, &id)?;
    let tool = ToolId::parse(&body.tool_id).ok_or_else(|| ApiError::unprocessable(format!("unknown tool {}", body.tool_id)))?;
    let session_id = session_id_for(&p.user_id, &id);
    let st = s
        .engine
        .session(&session_id)
        .ok_or_else(|| ApiError::not_found(format!("activity {id} has not been started")))?;
    if tool == ToolId::Notebook {
        let text = body.data.get("text").and_then(Value::as_str).or(body.text.as_deref()).unwrap_or("");
        let event_id = s.engine.store().append(notebook_event(&p.user_id, Some(&session_id), text)).map_err(ApiError::internal)?;
        return Ok(Json(json!({ "event_ids": [event_id], "reply": null, "decision": null, "tool_directives": [] })).into_response());
    }
    if !st.is_completed() && !st.current_stage(a).binds(tool) {
        return Err(ApiError::unprocessable(format!("{tool} is not available in this stage")));
    }
    let msg = UserMessage {
        session_id: String::new(),
        text: body.text.unwrap_or_else(|| format!("(submitted {tool})")),
        attached_tool_result: Some(ToolResultPayload { tool_id: tool, data: body.data }),
        client_timestamp: None,
    };
    Ok(drive_turn(s.clone(), &p.user_id, &id, msg).await?.into_response())
}

async fn session_state(State(s): Shared, Auth(p): Auth, Path(id): Path<String>) -> Result<Json<StateView>, ApiError> {
    let a = lookup_activity(&s, &id)?;
    let st = s
        .engine
        .session_for(&p.user_id, &id)
        .ok_or_else(|| ApiError::not_found(format!("activity {id} has not been started")))?;
    Ok(Json(state_view(&st, a)))
}

#[derive(Deserialize)]
struct DialogueQuery {
    #[serde(default)]
    k: Option<usize>,
}

async fn dialogue(
    State(s): Shared,
    Auth(p): Auth,
    Path(id): Path<String>,
    Query(q): Query<DialogueQuery>,
) -> Result<Json<Vec<DialogueEntry>>, ApiError> {
    lookup_activity(&s, &id)?;
    let sid = session_id_for(&p.user_id, &id);
    Ok(Json(s.engine.store().recent_dialogue(&sid, q.k.unwrap_or(100))))
}

async fn notebook(State(s): Shared, Auth(p): Auth) -> Json<Value> {
    let latest = s.engine.store().read(|events| {
        events
            .iter()
            .rev()
            .find(|e| {
                e.kind == EventKind::ToolEvent
                    && e.user_id == p.user_id
                    && e.str_field("tool_id") == Some("notebook")
                    && e.str_field("source") == Some("user")
            })
            .map(|e| (e.event_id, e.payload.pointer("/data/text").and_then(Value::as_str).unwrap_or("").to_string()))
    });
    let (event_id, text) = latest.map_or((None, String::new()), |(id, t)| (Some(id), t));
    Json(json!({ "text": text, "event_id": event_id }))
}

#[derive(Deserialize)]
struct NotebookBody {
    text: String,
}

async fn save_notebook(State(s): Shared, Auth(p): Auth, Json(b): Json<NotebookBody>) -> Result<Json<Value>, ApiError> {
    let event_id = s.engine.store().append(notebook_event(&p.user_id, None, &b.text)).map_err(ApiError::internal)?;
    Ok(Json(json!({ "event_id": event_id })))
}

#[derive(Deserialize)]
struct FeedbackBody {
    target_event_id: u64,
    vote: String,
    #[serde(default)]
    note: Option<String>,
}

async fn feedback(State(s): Shared, Auth(p): Auth, Json(b): Json<FeedbackBody>) -> Result<StatusCode, ApiError> {
    let vote = Vote::parse(&b.vote).ok_or_else(|| ApiError::unprocessable("vote must be up or down"))?;
    record_feedback(s.engine.store(), &p.user_id, b.target_event_id, vote, b.note.as_deref())?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stats(State(s): Shared, Auth(_): Auth) -> impl IntoResponse {
    Json(s.engine.store().read(feedback_stats))
}

fn attempt_json(s: &AppState, a: &DiagnosisAttemptState) -> Result<Value, ApiError> {
    let d = s.engine.pack().get_diagnosis(&a.diagnosis_id).map_err(|e| ApiError::not_found(e.to_string()))?;
    let questions: Vec<Value> = d
        .questions
        .iter()
        .map(|q| json!({ "id": q.id, "prompt": q.prompt, "options": q.options, "multi_select": q.multi_select }))
        .collect();
    Ok(json!({ "attempt": a, "questions": questions }))
}

fn current_attempt(s: &AppState, user: &str, diagnosis_id: &str) -> Result<DiagnosisAttemptState, ApiError> {
    s.diagnosis
        .latest_attempt(user, diagnosis_id)
        .ok_or_else(|| ApiError::not_found(format!("diagnosis {diagnosis_id} has not been opened")))
}

async fn open_diagnosis(State(s): Shared, Auth(p): Auth, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let a = s.diagnosis.open_diagnosis(&p.user_id, &id)?;
    Ok(Json(attempt_json(&s, &a)?))
}

#[derive(Deserialize)]
struct SelectBody {
    question_id: String,
    option_id: String,
    selected: bool,
}

async fn select_option(
    State(s): Shared,
    Auth(p): Auth,
    Path(id): Path<String>,
    Json(b): Json<SelectBody>,
) -> Result<Json<DiagnosisAttemptState>, ApiError> {
    let a = current_attempt(&s, &p.user_id, &id)?;
    Ok(Json(s.diagnosis.select(&a.attempt_id, &b.question_id, &b.option_id, b.selected)?))
}

#[derive(Deserialize)]
struct CursorBody {
    cursor: usize,
}

async fn move_cursor(
    State(s): Shared,
    Auth(p): Auth,
    Path(id): Path<String>,
    Json(b): Json<CursorBody>,
) -> Result<Json<DiagnosisAttemptState>, ApiError> {
    let a = current_attempt(&s, &p.user_id, &id)?;
    Ok(Json(s.diagnosis.set_cursor(&a.attempt_id, b.cursor)?))
}

async fn finish_diagnosis(State(s): Shared, Auth(p): Auth, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let a = current_attempt(&s, &p.user_id, &id)?;
    let (attempt, score) = s.diagnosis.finish(&a.attempt_id)?;
    Ok(Json(json!({ "attempt": attempt, "score": score })))
}

async fn retake_diagnosis(State(s): Shared, Auth(p): Auth, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let a = s.diagnosis.retake(&p.user_id, &id)?;
    Ok(Json(attempt_json(&s, &a)?))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    kinds: Option<String>,
    #[serde(default)]
    since: Option<String>,
    #[serde(default)]
    until: Option<String>,
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    pseudonymize: Option<bool>,
}

/// Builds an export filter from textual bounds (RFC 3339 or epoch ms).
pub fn export_filter(
    kinds: Option<&str>,
    since: Option<&str>,
    until: Option<&str>,
    user: Option<&str>,
) -> Result<EventFilter, String> {
    let kinds = kinds
        .filter(|k| !k.trim().is_empty())
        .map(|k| {
            k.split(',')
                .map(|x| EventKind::parse(x).ok_or_else(|| format!("unknown event kind {x:?}")))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let ts = |v: Option<&str>| -> Result<Option<i64>, String> {
        v.filter(|x| !x.trim().is_empty())
            .map(|x| x.trim().parse::<i64>().ok().or_else(|| parse_ts(x.trim())).ok_or_else(|| format!("bad timestamp {x:?}")))
            .transpose()
    };
    Ok(EventFilter { user_id: user.map(str::to_string), kinds, since: ts(since)?, until: ts(until)? })
}

async fn export(State(s): Shared, Auth(p): Auth, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    require_admin(&p)?;
    let filter = export_filter(q.kinds.as_deref(), q.since.as_deref(), q.until.as_deref(), q.user.as_deref())
        .map_err(ApiError::unprocessable)?;
    let mut buf = Vec::new();
    s.engine
        .store()
        .write_export(&mut buf, &filter, q.pseudonymize.unwrap_or(false))
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(buf)).into_response())
}

async fn admin_skip(State(s): Shared, Auth(p): Auth, Path(session_id): Path<String>) -> Result<Json<Value>, ApiError> {
    require_admin(&p)?;
    let slot = TurnSlot::acquire(&s, &session_id)
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "turn_in_flight", "a turn is running for this session"))?;
    let st = s.engine.force_decision(&session_id, FacilitatorAction::SkipStage)?;
    drop(slot);
    let a = lookup_activity(&s, &st.activity_id)?;
    Ok(Json(json!({ "state": state_view(&st, a) })))
}
