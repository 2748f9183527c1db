//! Per-user learning state.
//!
//! A session tracks one user's progress through one activity: the current
//! stage, the status of every expectation and the miss counter that drives
//! stage skipping. States change only through [`apply_decision`], and every
//! change is recorded as a `StateTransition` event so that the whole ledger
//! can be rebuilt from the log.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::content::{Activity, ContentPack, KnowledgeDomain, Stage};
use crate::events::{EventError, EventKind, EventRecord, EventStore, NewEvent};
use crate::pipeline::{AggregatedVerdict, FacilitatorAction, FacilitatorDecision};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("activity {0} not found")]
    ActivityNotFound(String),
    #[error("{0} is locked until every activity of its module is completed")]
    ActivityLocked(String),
    #[error("illegal transition {action:?}: {reason}")]
    IllegalTransition { action: FacilitatorAction, reason: String },
    #[error("activity is not completed yet")]
    NotCompleted,
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {0} is already completed")]
    SessionCompleted(String),
    #[error("session {0} changed underneath this update")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpectationStatus {
    Unmet,
    Met,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lifecycle {
    InProgress,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub user_id: String,
    pub activity_id: String,
    pub stage_index: usize,
    pub expectation_status: BTreeMap<String, ExpectationStatus>,
    pub consecutive_misses: u32,
    pub lifecycle: Lifecycle,
    pub created_at: i64,
    pub updated_at: i64,
}

pub fn session_id_for(user_id: &str, activity_id: &str) -> String {
    format!("{user_id}::{activity_id}")
}

impl SessionState {
    pub fn fresh(user_id: &str, activity: &Activity, at: i64) -> Self {
        SessionState {
            session_id: session_id_for(user_id, &activity.id),
            user_id: user_id.to_string(),
            activity_id: activity.id.clone(),
            stage_index: 0,
            expectation_status: activity
                .expectations()
                .map(|e| (e.id.clone(), ExpectationStatus::Unmet))
                .collect(),
            consecutive_misses: 0,
            lifecycle: Lifecycle::InProgress,
            created_at: at,
            updated_at: at,
        }
    }

    pub fn status(&self, expectation_id: &str) -> Option<ExpectationStatus> {
        self.expectation_status.get(expectation_id).copied()
    }

    pub fn is_unmet(&self, expectation_id: &str) -> bool {
        self.status(expectation_id) == Some(ExpectationStatus::Unmet)
    }

    pub fn is_completed(&self) -> bool {
        self.lifecycle == Lifecycle::Completed
    }

    pub fn all_resolved(&self) -> bool {
        self.expectation_status.values().all(|s| *s != ExpectationStatus::Unmet)
    }

    pub fn current_stage<'a>(&self, activity: &'a Activity) -> &'a Stage {
        &activity.stages[self.stage_index.min(activity.last_stage_index())]
    }

    /// Checks the structural invariants against the activity definition.
    pub fn check(&self, activity: &Activity) -> Result<(), String> {
        if self.stage_index >= activity.stages.len() {
            return Err(format!("stage_index {} out of range", self.stage_index));
        }
        let keys: BTreeSet<&str> = self.expectation_status.keys().map(String::as_str).collect();
        let ids: BTreeSet<&str> = activity.expectations().map(|e| e.id.as_str()).collect();
        if keys != ids {
            return Err("expectation keys differ from the activity".into());
        }
        let done = self.all_resolved() && self.stage_index == activity.last_stage_index();
        if self.is_completed() != done {
            return Err(format!("lifecycle {:?} but resolved={done}", self.lifecycle));
        }
        Ok(())
    }
}

/// Applies a facilitator decision to a session and returns the new state.
pub fn apply_decision(
    state: &SessionState,
    activity: &Activity,
    verdict: Option<&AggregatedVerdict>,
    decision: &FacilitatorDecision,
    at: i64,
) -> Result<SessionState, EngineError> {
    let covered = verdict.map(|v| v.covered.clone()).unwrap_or_default();
    transition(state, activity, &covered, decision.action, at)
}

pub(crate) fn transition(
    state: &SessionState,
    activity: &Activity,
    covered: &BTreeSet<String>,
    action: FacilitatorAction,
    at: i64,
) -> Result<SessionState, EngineError> {
    if state.is_completed() {
        return Err(EngineError::IllegalTransition { action, reason: "session is completed".into() });
    }
    let mut next = state.clone();
    next.updated_at = at;
    match action {
        FacilitatorAction::AdvanceExpectation => {
            mark_met(&mut next, activity, covered);
            next.consecutive_misses = 0;
            advance_resolved_stages(&mut next, activity);
        }
        FacilitatorAction::SendHint => next.consecutive_misses += 1,
        FacilitatorAction::SkipStage => {
            let stage = next.current_stage(activity);
            for id in stage.expectation_ids() {
                if let Some(s @ ExpectationStatus::Unmet) = next.expectation_status.get_mut(id) {
                    *s = ExpectationStatus::Skipped;
                }
            }
            next.consecutive_misses = 0;
            advance_resolved_stages(&mut next, activity);
        }
        FacilitatorAction::CompleteActivity => {
            mark_met(&mut next, activity, covered);
            if !next.all_resolved() {
                return Err(EngineError::IllegalTransition {
                    action,
                    reason: "unmet expectations remain".into(),
                });
            }
            next.consecutive_misses = 0;
            next.stage_index = activity.last_stage_index();
            next.lifecycle = Lifecycle::Completed;
        }
        FacilitatorAction::AnswerSideQuestion
        | FacilitatorAction::RedirectOffTopic
        | FacilitatorAction::AcknowledgeAndStay => {}
    }
    Ok(next)
}

fn mark_met(state: &mut SessionState, activity: &Activity, covered: &BTreeSet<String>) {
    let stage = state.current_stage(activity);
    for id in stage.expectation_ids().filter(|id| covered.contains(*id)) {
        if let Some(s @ ExpectationStatus::Unmet) = state.expectation_status.get_mut(id) {
            *s = ExpectationStatus::Met;
        }
    }
}

fn advance_resolved_stages(state: &mut SessionState, activity: &Activity) {
    loop {
        let stage = state.current_stage(activity);
        if stage.expectation_ids().any(|id| state.is_unmet(id)) {
            return;
        }
        if state.stage_index >= activity.last_stage_index() {
            state.lifecycle = Lifecycle::Completed;
            return;
        }
        state.stage_index += 1;
        state.consecutive_misses = 0;
    }
}

/// Renders the end-of-activity review. Met expectations are listed as
/// covered; skipped ones go under a "to revisit" section.
pub fn completion_summary(state: &SessionState, activity: &Activity) -> Result<String, EngineError> {
    if !state.is_completed() {
        return Err(EngineError::NotCompleted);
    }
    let list = |wanted: ExpectationStatus| {
        activity
            .expectations()
            .filter(|e| state.status(&e.id) == Some(wanted))
            .map(|e| format!("- {}", e.statement))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let met = list(ExpectationStatus::Met);
    let skipped = list(ExpectationStatus::Skipped);
    let revisit = if skipped.is_empty() { String::new() } else { format!("To revisit:\n{skipped}") };

    let template = &activity.summary_template;
    let mut out = crate::prompts::render(
        template,
        &[("title", &activity.title), ("met", &met), ("revisit", &revisit)],
    );
    if !template.contains("{met}") && !met.is_empty() {
        out.push_str(&format!("\n\nWhat you covered:\n{met}"));
    }
    if !template.contains("{revisit}") && !revisit.is_empty() {
        out.push_str(&format!("\n\n{revisit}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivityStatus {
    NotAttempted,
    Attempted,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityProgress {
    pub activity_id: String,
    pub title: String,
    pub status: ActivityStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleProgress {
    pub module_id: String,
    pub domain: KnowledgeDomain,
    pub title: String,
    pub activities: Vec<ActivityProgress>,
    pub diagnosis_id: String,
    pub diagnosis_unlocked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressView {
    pub user_id: String,
    pub modules: Vec<ModuleProgress>,
}

impl ProgressView {
    pub fn build<'a>(
        user_id: &str,
        pack: &ContentPack,
        lookup: impl Fn(&str) -> Option<&'a SessionState>,
    ) -> Self {
        let modules = pack
            .modules
            .iter()
            .map(|m| {
                let activities: Vec<_> = m
                    .activities
                    .iter()
                    .map(|a| {
                        let status = match lookup(&session_id_for(user_id, &a.id)) {
                            None => ActivityStatus::NotAttempted,
                            Some(s) if s.is_completed() => ActivityStatus::Completed,
                            Some(_) => ActivityStatus::Attempted,
                        };
                        ActivityProgress { activity_id: a.id.clone(), title: a.title.clone(), status }
                    })
                    .collect();
                let diagnosis_unlocked = activities.iter().all(|a| a.status == ActivityStatus::Completed);
                ModuleProgress {
                    module_id: m.id.clone(),
                    domain: m.domain,
                    title: m.title.clone(),
                    activities,
                    diagnosis_id: m.diagnosis.id.clone(),
                    diagnosis_unlocked,
                }
            })
            .collect();
        ProgressView { user_id: user_id.to_string(), modules }
    }

    pub fn status(&self, activity_id: &str) -> Option<ActivityStatus> {
        self.modules
            .iter()
            .flat_map(|m| m.activities.iter())
            .find(|a| a.activity_id == activity_id)
            .map(|a| a.status)
    }

    pub fn diagnosis_unlocked(&self, diagnosis_id: &str) -> bool {
        self.modules.iter().any(|m| m.diagnosis_id == diagnosis_id && m.diagnosis_unlocked)
    }
}

pub(crate) mod transitions {
    pub const SESSION_START: &str = "session_start";
    pub const SESSION_RESUME: &str = "session_resume";
    pub const DECISION: &str = "decision";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionPayload {
    transition: String,
    #[serde(default)]
    activity_id: Option<String>,
    #[serde(default)]
    action: Option<FacilitatorAction>,
    #[serde(default)]
    covered: BTreeSet<String>,
    #[serde(default)]
    at: Option<i64>,
}

pub(crate) fn decision_event(
    prev: &SessionState,
    next: &SessionState,
    covered: &BTreeSet<String>,
    action: FacilitatorAction,
    turn_id: Option<&str>,
) -> NewEvent {
    NewEvent::new(
        EventKind::StateTransition,
        &prev.user_id,
        json!({
            "transition": transitions::DECISION,
            "turn_id": turn_id,
            "action": action,
            "covered": covered,
            "at": next.updated_at,
            "stage_index": next.stage_index,
            "lifecycle": next.lifecycle,
        }),
    )
    .session(&prev.session_id)
}

/// Rebuilds every session from the log by re-applying recorded transitions.
pub fn replay_sessions(pack: &ContentPack, events: &[EventRecord]) -> BTreeMap<String, SessionState> {
    let mut sessions = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::StateTransition) {
        let Some(session_id) = e.session_id.as_deref() else { continue };
        let Some(p) = e.payload_as::<TransitionPayload>() else { continue };
        match p.transition.as_str() {
            transitions::SESSION_START => {
                let activity = p.activity_id.as_deref().and_then(|id| pack.get_activity(id).ok());
                let Some(activity) = activity else {
                    tracing::warn!(event_id = e.event_id, "session start for unknown activity");
                    continue;
                };
                sessions.insert(session_id.to_string(), SessionState::fresh(&e.user_id, activity, p.at.unwrap_or(e.ts)));
            }
            transitions::DECISION => {
                let Some(state) = sessions.get(session_id) else { continue };
                let Ok(activity) = pack.get_activity(&state.activity_id) else { continue };
                let Some(action) = p.action else { continue };
                match transition(state, activity, &p.covered, action, p.at.unwrap_or(e.ts)) {
                    Ok(next) => {
                        sessions.insert(session_id.to_string(), next);
                    }
                    Err(err) => tracing::warn!(event_id = e.event_id, %err, "unreplayable transition"),
                }
            }
            _ => {}
        }
    }
    sessions
}

/// Progress as a pure function of the event history.
pub fn progress_view(user_id: &str, pack: &ContentPack, store: &EventStore) -> ProgressView {
    let sessions = store.read(|log| replay_sessions(pack, log));
    ProgressView::build(user_id, pack, |id| sessions.get(id))
}

/// Owns the live session cache on top of the event log.
pub struct ActivityEngine {
    pack: Arc<ContentPack>,
    store: Arc<EventStore>,
    sessions: RwLock<HashMap<String, SessionState>>,
}

impl ActivityEngine {
    /// Builds the cache by replaying whatever the store already holds.
    pub fn new(pack: Arc<ContentPack>, store: Arc<EventStore>) -> Self {
        let sessions = store.read(|log| replay_sessions(&pack, log)).into_iter().collect();
        ActivityEngine { pack, store, sessions: RwLock::new(sessions) }
    }

    pub fn pack(&self) -> &Arc<ContentPack> {
        &self.pack
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn session(&self, session_id: &str) -> Option<SessionState> {
        self.sessions.read().unwrap().get(session_id).cloned()
    }

    pub fn session_for(&self, user_id: &str, activity_id: &str) -> Option<SessionState> {
        self.session(&session_id_for(user_id, activity_id))
    }

    pub fn all_sessions(&self) -> BTreeMap<String, SessionState> {
        self.sessions.read().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn start_or_resume(&self, user_id: &str, activity_id: &str) -> Result<SessionState, EngineError> {
        let activity = match self.pack.get_activity(activity_id) {
            Ok(a) => a,
            Err(_) => {
                if self.pack.get_diagnosis(activity_id).is_ok() && !self.progress_view(user_id).diagnosis_unlocked(activity_id) {
                    return Err(EngineError::ActivityLocked(activity_id.to_string()));
                }
                return Err(EngineError::ActivityNotFound(activity_id.to_string()));
            }
        };
        let session_id = session_id_for(user_id, activity_id);
        let mut sessions = self.sessions.write().unwrap();
        if let Some(existing) = sessions.get(&session_id) {
            self.store.append(
                NewEvent::new(
                    EventKind::StateTransition,
                    user_id,
                    json!({ "transition": transitions::SESSION_RESUME, "activity_id": activity_id }),
                )
                .session(&session_id),
            )?;
            return Ok(existing.clone());
        }
        let state = SessionState::fresh(user_id, activity, self.store.now_ms());
        self.store.append(
            NewEvent::new(
                EventKind::StateTransition,
                user_id,
                json!({
                    "transition": transitions::SESSION_START,
                    "activity_id": activity_id,
                    "at": state.created_at,
                }),
            )
            .session(&session_id),
        )?;
        sessions.insert(session_id, state.clone());
        Ok(state)
    }

    /// Appends `events` and, only if that succeeds, installs `next`. Fails
    /// if the cached state is no longer `prev`.
    pub fn commit(&self, prev: &SessionState, next: SessionState, events: Vec<NewEvent>) -> Result<Vec<u64>, EngineError> {
        let mut sessions = self.sessions.write().unwrap();
        if sessions.get(&prev.session_id) != Some(prev) {
            return Err(EngineError::Conflict(prev.session_id.clone()));
        }
        let ids = self.store.append_batch(events)?;
        sessions.insert(next.session_id.clone(), next);
        Ok(ids)
    }

    /// Applies a decision outside of a dialogue turn (admin override).
    pub fn force_decision(&self, session_id: &str, action: FacilitatorAction) -> Result<SessionState, EngineError> {
        let prev = self.session(session_id).ok_or_else(|| EngineError::SessionNotFound(session_id.into()))?;
        let activity = self
            .pack
            .get_activity(&prev.activity_id)
            .map_err(|_| EngineError::ActivityNotFound(prev.activity_id.clone()))?;
        let covered = BTreeSet::new();
        let next = transition(&prev, activity, &covered, action, self.store.now_ms())?;
        let mut event = decision_event(&prev, &next, &covered, action, None);
        event.payload["override"] = json!(true);
        self.commit(&prev, next.clone(), vec![event])?;
        Ok(next)
    }

    pub fn progress_view(&self, user_id: &str) -> ProgressView {
        let sessions = self.sessions.read().unwrap();
        ProgressView::build(user_id, &self.pack, |id| sessions.get(id))
    }
}
