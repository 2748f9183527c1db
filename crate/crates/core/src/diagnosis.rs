//! End-of-module diagnosis tests.
//!
//! Questions are shown one at a time; every option toggle is logged as its
//! own `DiagnosisAnswer` event so revisions survive as a time series. An
//! attempt is opened only once every learning activity of the module is
//! completed, and retakes start a new attempt while keeping old ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::content::{Diagnosis, DiagnosisQuestion};
use crate::engine::ActivityEngine;
use crate::events::{EventError, EventKind, EventRecord, NewEvent};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("diagnosis {0} is locked")]
    Locked(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("question {question_id} has no option {option_id}")]
    UnknownOption { question_id: String, option_id: String },
    #[error("attempt is already finished")]
    AttemptFinished,
    #[error("attempt is not finished")]
    NotFinished,
    #[error("cursor {0} is out of range")]
    CursorOutOfRange(usize),
    #[error(transparent)]
    Store(#[from] EventError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisAttemptState {
    pub attempt_id: String,
    pub user_id: String,
    pub diagnosis_id: String,
    pub cursor: usize,
    pub selections: BTreeMap<String, BTreeSet<String>>,
    pub finished: bool,
}

impl DiagnosisAttemptState {
    pub fn fresh(attempt_id: &str, user_id: &str, diagnosis_id: &str) -> Self {
        DiagnosisAttemptState {
            attempt_id: attempt_id.into(),
            user_id: user_id.into(),
            diagnosis_id: diagnosis_id.into(),
            cursor: 0,
            selections: BTreeMap::new(),
            finished: false,
        }
    }

    fn toggle(&mut self, question_id: &str, option_id: &str, selected: bool, multi_select: bool) {
        let set = self.selections.entry(question_id.to_string()).or_default();
        match (selected, multi_select) {
            (true, false) => {
                set.clear();
                set.insert(option_id.to_string());
            }
            (true, true) => {
                set.insert(option_id.to_string());
            }
            (false, _) => {
                set.remove(option_id);
            }
        }
        if set.is_empty() {
            self.selections.remove(question_id);
        }
    }
}

/// Applies one selection change. Single-select questions replace the
/// previous choice; deselecting an unselected option is a no-op.
pub fn record_selection(
    state: &DiagnosisAttemptState,
    question: &DiagnosisQuestion,
    option_id: &str,
    selected: bool,
) -> Result<DiagnosisAttemptState, DiagnosisError> {
    if state.finished {
        return Err(DiagnosisError::AttemptFinished);
    }
    if !question.has_option(option_id) {
        return Err(DiagnosisError::UnknownOption { question_id: question.id.clone(), option_id: option_id.into() });
    }
    let mut next = state.clone();
    next.toggle(&question.id, option_id, selected, question.multi_select);
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisScore {
    pub per_question: BTreeMap<String, bool>,
    pub total_correct: usize,
    pub question_count: usize,
}

/// Exact-set scoring: a question is correct only when the selection equals
/// the key. Unanswered questions score as incorrect.
pub fn score_diagnosis(state: &DiagnosisAttemptState, diagnosis: &Diagnosis) -> Result<DiagnosisScore, DiagnosisError> {
    if !state.finished {
        return Err(DiagnosisError::NotFinished);
    }
    let empty = BTreeSet::new();
    let per_question: BTreeMap<String, bool> = diagnosis
        .questions
        .iter()
        .map(|q| {
            let chosen = state.selections.get(&q.id).unwrap_or(&empty);
            let key: BTreeSet<String> = q.correct_option_ids.iter().cloned().collect();
            (q.id.clone(), *chosen == key)
        })
        .collect();
    let total_correct = per_question.values().filter(|c| **c).count();
    Ok(DiagnosisScore { per_question, total_correct, question_count: diagnosis.questions.len() })
}

mod transitions {
    pub const OPEN: &str = "diagnosis_open";
    pub const RESUME: &str = "diagnosis_resume";
    pub const CURSOR: &str = "diagnosis_cursor";
    pub const FINISH: &str = "diagnosis_finish";
}

#[derive(Deserialize)]
struct AttemptEvent {
    #[serde(default)]
    transition: Option<String>,
    attempt_id: String,
    #[serde(default)]
    diagnosis_id: Option<String>,
    #[serde(default)]
    question_id: Option<String>,
    #[serde(default)]
    option_id: Option<String>,
    #[serde(default)]
    selected: Option<bool>,
    #[serde(default)]
    multi_select: Option<bool>,
    #[serde(default)]
    cursor: Option<usize>,
}

/// Folds the log back into attempt states.
pub fn replay_attempts(events: &[EventRecord]) -> BTreeMap<String, DiagnosisAttemptState> {
    let mut attempts: BTreeMap<String, DiagnosisAttemptState> = BTreeMap::new();
    for e in events {
        if !matches!(e.kind, EventKind::DiagnosisAnswer | EventKind::StateTransition) {
            continue;
        }
        let Some(p) = e.payload_as::<AttemptEvent>() else { continue };
        if e.kind == EventKind::DiagnosisAnswer {
            let (Some(q), Some(o), Some(sel)) = (&p.question_id, &p.option_id, p.selected) else { continue };
            if let Some(a) = attempts.get_mut(&p.attempt_id) {
                a.toggle(q, o, sel, p.multi_select.unwrap_or(false));
            }
            continue;
        }
        match p.transition.as_deref() {
            Some(transitions::OPEN) => {
                let diag = p.diagnosis_id.clone().unwrap_or_default();
                attempts.insert(p.attempt_id.clone(), DiagnosisAttemptState::fresh(&p.attempt_id, &e.user_id, &diag));
            }
            Some(transitions::CURSOR) => {
                if let (Some(a), Some(c)) = (attempts.get_mut(&p.attempt_id), p.cursor) {
                    a.cursor = c;
                }
            }
            Some(transitions::FINISH) => {
                if let Some(a) = attempts.get_mut(&p.attempt_id) {
                    a.finished = true;
                }
            }
            _ => {}
        }
    }
    attempts
}

/// Live attempt cache, persisted through the engine's event store.
pub struct DiagnosisService {
    engine: Arc<ActivityEngine>,
    attempts: RwLock<HashMap<String, DiagnosisAttemptState>>,
}

impl DiagnosisService {
    pub fn new(engine: Arc<ActivityEngine>) -> Self {
        let attempts = engine.store().read(replay_attempts).into_iter().collect();
        DiagnosisService { engine, attempts: RwLock::new(attempts) }
    }

    fn diagnosis(&self, diagnosis_id: &str) -> Result<&Diagnosis, DiagnosisError> {
        self.engine
            .pack()
            .get_diagnosis(diagnosis_id)
            .map_err(|_| DiagnosisError::NotFound(format!("diagnosis {diagnosis_id}")))
    }

    fn attempts_of(&self, user_id: &str, diagnosis_id: &str) -> Vec<DiagnosisAttemptState> {
        let mut v: Vec<_> = self
            .attempts
            .read()
            .unwrap()
            .values()
            .filter(|a| a.user_id == user_id && a.diagnosis_id == diagnosis_id)
            .cloned()
            .collect();
        v.sort_by_key(|a| attempt_number(&a.attempt_id));
        v
    }

    pub fn latest_attempt(&self, user_id: &str, diagnosis_id: &str) -> Option<DiagnosisAttemptState> {
        self.attempts_of(user_id, diagnosis_id).pop()
    }

    pub fn attempt_count(&self, user_id: &str, diagnosis_id: &str) -> usize {
        self.attempts_of(user_id, diagnosis_id).len()
    }

    /// Returns the latest attempt, or starts the first one.
    pub fn open_diagnosis(&self, user_id: &str, diagnosis_id: &str) -> Result<DiagnosisAttemptState, DiagnosisError> {
        self.diagnosis(diagnosis_id)?;
        if !self.engine.progress_view(user_id).diagnosis_unlocked(diagnosis_id) {
            return Err(DiagnosisError::Locked(diagnosis_id.to_string()));
        }
        if let Some(a) = self.latest_attempt(user_id, diagnosis_id) {
            self.engine.store().append(NewEvent::new(
                EventKind::StateTransition,
                user_id,
                json!({ "transition": transitions::RESUME, "attempt_id": a.attempt_id }),
            ))?;
            return Ok(a);
        }
        self.new_attempt(user_id, diagnosis_id)
    }

    /// Starts a new attempt; earlier ones stay in the log untouched.
    pub fn retake(&self, user_id: &str, diagnosis_id: &str) -> Result<DiagnosisAttemptState, DiagnosisError> {
        self.diagnosis(diagnosis_id)?;
        if !self.engine.progress_view(user_id).diagnosis_unlocked(diagnosis_id) {
            return Err(DiagnosisError::Locked(diagnosis_id.to_string()));
        }
        self.new_attempt(user_id, diagnosis_id)
    }

    fn new_attempt(&self, user_id: &str, diagnosis_id: &str) -> Result<DiagnosisAttemptState, DiagnosisError> {
        let mut attempts = self.attempts.write().unwrap();
        let n = attempts.values().filter(|a| a.user_id == user_id && a.diagnosis_id == diagnosis_id).count() + 1;
        let attempt_id = format!("{user_id}::{diagnosis_id}::{n}");
        let state = DiagnosisAttemptState::fresh(&attempt_id, user_id, diagnosis_id);
        self.engine.store().append(NewEvent::new(
            EventKind::StateTransition,
            user_id,
            json!({ "transition": transitions::OPEN, "attempt_id": attempt_id, "diagnosis_id": diagnosis_id }),
        ))?;
        attempts.insert(attempt_id, state.clone());
        Ok(state)
    }

    fn update(
        &self,
        attempt_id: &str,
        f: impl FnOnce(&DiagnosisAttemptState, &Diagnosis) -> Result<(DiagnosisAttemptState, NewEvent), DiagnosisError>,
    ) -> Result<DiagnosisAttemptState, DiagnosisError> {
        let mut attempts = self.attempts.write().unwrap();
        let current = attempts
            .get(attempt_id)
            .ok_or_else(|| DiagnosisError::NotFound(format!("attempt {attempt_id}")))?;
        let diagnosis = self.diagnosis(&current.diagnosis_id)?;
        let (next, event) = f(current, diagnosis)?;
        self.engine.store().append(event)?;
        attempts.insert(attempt_id.to_string(), next.clone());
        Ok(next)
    }

    /// Records one option toggle; every call is logged, even no-ops.
    pub fn select(
        &self,
        attempt_id: &str,
        question_id: &str,
        option_id: &str,
        selected: bool,
    ) -> Result<DiagnosisAttemptState, DiagnosisError> {
        self.update(attempt_id, |state, diagnosis| {
            let question = diagnosis
                .question(question_id)
                .ok_or_else(|| DiagnosisError::UnknownQuestion(question_id.to_string()))?;
            let next = record_selection(state, question, option_id, selected)?;
            let event = NewEvent::new(
                EventKind::DiagnosisAnswer,
                &state.user_id,
                json!({
                    "attempt_id": state.attempt_id,
                    "diagnosis_id": state.diagnosis_id,
                    "question_id": question_id,
                    "option_id": option_id,
                    "selected": selected,
                    "multi_select": question.multi_select,
                }),
            );
            Ok((next, event))
        })
    }

    pub fn set_cursor(&self, attempt_id: &str, cursor: usize) -> Result<DiagnosisAttemptState, DiagnosisError> {
        self.update(attempt_id, |state, diagnosis| {
            if state.finished {
                return Err(DiagnosisError::AttemptFinished);
            }
            if cursor > diagnosis.questions.len() {
                return Err(DiagnosisError::CursorOutOfRange(cursor));
            }
            let mut next = state.clone();
            next.cursor = cursor;
            let event = NewEvent::new(
                EventKind::StateTransition,
                &state.user_id,
                json!({ "transition": transitions::CURSOR, "attempt_id": state.attempt_id, "cursor": cursor }),
            );
            Ok((next, event))
        })
    }

    /// Finishes the attempt (blank answers allowed) and scores it.
    pub fn finish(&self, attempt_id: &str) -> Result<(DiagnosisAttemptState, DiagnosisScore), DiagnosisError> {
        let state = self.update(attempt_id, |state, _| {
            if state.finished {
                return Err(DiagnosisError::AttemptFinished);
            }
            let mut next = state.clone();
            next.finished = true;
            let event = NewEvent::new(
                EventKind::StateTransition,
                &state.user_id,
                json!({ "transition": transitions::FINISH, "attempt_id": state.attempt_id }),
            );
            Ok((next, event))
        })?;
        let score = score_diagnosis(&state, self.diagnosis(&state.diagnosis_id)?)?;
        Ok((state, score))
    }

    pub fn attempt(&self, attempt_id: &str) -> Option<DiagnosisAttemptState> {
        self.attempts.read().unwrap().get(attempt_id).cloned()
    }
}

fn attempt_number(attempt_id: &str) -> usize {
    attempt_id.rsplit("::").next().and_then(|n| n.parse().ok()).unwrap_or(0)
}
