//! Runs one dialogue round end to end and commits it atomically.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::content::Expectation;
use crate::engine::{apply_decision, completion_summary, decision_event, ActivityEngine, EngineError, SessionState};
use crate::events::{Component, DialogueEntry, EventKind, NewEvent};
use crate::gateway::{GatewayError, LlmRequest, RoleTag, TranscriptTurn};
use crate::pipeline::{
    facilitate, render_transcript, transcript_with, Agents, FacilitatorAction, FacilitatorDecision, GatewayCall,
    PipelineTrace, ResponderInput, ResponderOutput, UserMessage,
};

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {0} is completed")]
    SessionCompleted(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("gateway failure during {step}: {source}")]
    Gateway { step: &'static str, source: GatewayError },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnResult {
    pub turn_id: String,
    pub reply: ResponderOutput,
    pub decision: FacilitatorDecision,
    pub trace: PipelineTrace,
    pub state: SessionState,
    pub event_ids: Vec<u64>,
    /// Rendered completion summary once the activity is completed.
    pub summary: Option<String>,
}

fn to_transcript(entries: Vec<DialogueEntry>) -> Vec<TranscriptTurn> {
    entries
        .into_iter()
        .map(|e| TranscriptTurn { speaker: e.speaker, text: e.text })
        .collect()
}

/// Logged without latency so that replaying a script reproduces the log.
fn calls_json(calls: &[GatewayCall]) -> serde_json::Value {
    calls
        .iter()
        .map(|c| {
            tracing::debug!(role = c.role_tag.as_str(), latency_ms = c.latency_ms, ok = c.ok, "gateway call");
            json!({ "role_tag": c.role_tag, "request_digest": c.request_digest, "ok": c.ok })
        })
        .collect()
}

fn user_message_event(state: &SessionState, msg: &UserMessage, turn_id: &str) -> NewEvent {
    NewEvent::new(
        EventKind::UserMessage,
        &state.user_id,
        json!({
            "turn_id": turn_id,
            "text": msg.text,
            "attached_tool_result": msg.attached_tool_result,
            "client_timestamp": msg.client_timestamp,
        }),
    )
    .session(&state.session_id)
}

fn next_turn_id(engine: &ActivityEngine) -> String {
    format!("turn-{}", engine.store().len() + 1)
}

/// Filter → Judge(s) → Responder → Facilitator for one message. Either the
/// whole turn (events plus state change) is committed, or the state is left
/// untouched and only a `TurnFailed` record is written.
pub fn run_turn(
    engine: &ActivityEngine,
    agents: Agents<'_>,
    session_id: &str,
    msg: &UserMessage,
) -> Result<TurnResult, TurnError> {
    let state = engine
        .session(session_id)
        .ok_or_else(|| TurnError::SessionNotFound(session_id.to_string()))?;
    let turn_id = next_turn_id(engine);
    let fail = |reason: &str, step: &str| {
        let ev = NewEvent::new(
            EventKind::TurnFailed,
            &state.user_id,
            json!({ "turn_id": turn_id, "reason": reason, "step": step }),
        )
        .session(session_id);
        if let Err(e) = engine.store().append(ev) {
            tracing::error!(error = %e, "could not record failed turn");
        }
    };
    if state.is_completed() {
        fail("session completed", "admission");
        return Err(TurnError::SessionCompleted(session_id.to_string()));
    }
    msg.validate().map_err(TurnError::InvalidMessage)?;

    let pack = engine.pack().clone();
    let activity = pack
        .get_activity(&state.activity_id)
        .map_err(|_| EngineError::ActivityNotFound(state.activity_id.clone()))?;
    let stage = state.current_stage(activity);
    let candidates: Vec<&Expectation> = stage.expectations.iter().filter(|e| state.is_unmet(&e.id)).collect();
    let ctx = to_transcript(engine.store().recent_dialogue(session_id, agents.config.context_turns));
    let mut calls = Vec::new();

    let intent = agents
        .classify_intent(msg, &activity.question_text, &candidates, &ctx, &mut calls)
        .map_err(|source| {
            fail(&source.to_string(), "filter");
            TurnError::Gateway { step: "filter", source }
        })?;
    let filter_calls = calls.len();

    let verdict = if intent.kind.is_assessed() {
        let v = agents
            .judge_candidates(msg, &activity.question_text, &candidates, &ctx, agents.config.n_judges, &mut calls)
            .map_err(|source| {
                fail(&source.to_string(), "judge");
                TurnError::Gateway { step: "judge", source }
            })?;
        Some(v)
    } else {
        None
    };
    let judge_calls = calls.len();

    let input = ResponderInput::for_session(&intent, verdict.as_ref(), &state, activity, stage, msg, &ctx);
    let reply = agents.generate_response(&input, &mut calls);
    let responder_calls = calls.len();

    let mut decision = facilitate(verdict.as_ref(), &intent, &state, agents.config);
    let next = apply_decision(&state, activity, verdict.as_ref(), &decision, engine.store().now_ms())?;
    let summary = next.is_completed().then(|| completion_summary(&next, activity)).transpose()?;
    if let Some(s) = &summary {
        decision.message = s.clone();
    }

    let sys = |component: Component, body: serde_json::Value| {
        NewEvent::new(EventKind::SystemMessage, &state.user_id, body)
            .session(session_id)
            .component(component)
    };
    let mut events = vec![user_message_event(&state, msg, &turn_id)];
    events.push(sys(
        Component::Filter,
        json!({
            "turn_id": turn_id,
            "text": format!("{:?}", intent.kind),
            "intent": intent,
            "calls": calls_json(&calls[..filter_calls]),
        }),
    ));
    if let Some(v) = &verdict {
        let covered: Vec<&str> = v.covered.iter().map(String::as_str).collect();
        events.push(sys(
            Component::Judger,
            json!({
                "turn_id": turn_id,
                "text": if covered.is_empty() { "covered: none".to_string() } else { format!("covered: {}", covered.join(", ")) },
                "verdict": v,
                "candidates": candidates.iter().map(|e| &e.id).collect::<Vec<_>>(),
                "calls": calls_json(&calls[filter_calls..judge_calls]),
            }),
        ));
    }
    events.push(sys(
        Component::Responder,
        json!({
            "turn_id": turn_id,
            "text": reply.text,
            "tool_directives": reply.tool_directives,
            "image_refs": reply.image_refs,
            "fallback": reply.fallback,
            "calls": calls_json(&calls[judge_calls..responder_calls]),
        }),
    ));
    for d in &reply.tool_directives {
        events.push(
            NewEvent::new(
                EventKind::ToolEvent,
                &state.user_id,
                json!({
                    "turn_id": turn_id,
                    "source": "system",
                    "tool_id": d.tool_id,
                    "trigger_reason": d.trigger_reason,
                }),
            )
            .session(session_id)
            .component(Component::Tools),
        );
    }
    events.push(sys(
        Component::Facilitator,
        json!({ "turn_id": turn_id, "text": decision.message, "action": decision.action }),
    ));
    let covered = verdict.as_ref().map(|v| v.covered.clone()).unwrap_or_else(BTreeSet::new);
    events.push(decision_event(&state, &next, &covered, decision.action, Some(&turn_id)));

    let event_ids = engine.commit(&state, next.clone(), events)?;
    let trace = PipelineTrace {
        intent,
        verdict,
        responder_outputs: vec![reply.clone()],
        decision: decision.clone(),
        gateway_calls: calls,
    };
    Ok(TurnResult { turn_id, reply, decision, trace, state: next, event_ids, summary })
}

/// Conversation on an already completed activity. The ledger never
/// changes; the reply comes from the facilitator prompt, or the completion
/// summary if the gateway cannot answer.
pub fn review_turn(
    engine: &ActivityEngine,
    agents: Agents<'_>,
    session_id: &str,
    msg: &UserMessage,
) -> Result<TurnResult, TurnError> {
    let state = engine
        .session(session_id)
        .ok_or_else(|| TurnError::SessionNotFound(session_id.to_string()))?;
    msg.validate().map_err(TurnError::InvalidMessage)?;
    let activity = engine
        .pack()
        .get_activity(&state.activity_id)
        .map_err(|_| EngineError::ActivityNotFound(state.activity_id.clone()))?;
    let summary = completion_summary(&state, activity)?;
    let ctx = to_transcript(engine.store().recent_dialogue(session_id, agents.config.context_turns));
    let request = LlmRequest {
        role_tag: RoleTag::Facilitator,
        system_prompt: agents.prompts.render(
            RoleTag::Facilitator,
            &[
                ("question", &activity.question_text),
                ("summary", &summary),
                ("transcript", &render_transcript(&ctx)),
                ("message", &msg.text),
            ],
        ),
        transcript: transcript_with(&ctx, msg),
        temperature: agents.config.responder_temperature,
        seed: agents.config.seed,
    };
    let mut calls = Vec::new();
    let text = match agents.call(&request, &mut calls) {
        Ok(r) if !r.text.trim().is_empty() => r.text.trim().to_string(),
        _ => summary.clone(),
    };
    let turn_id = next_turn_id(engine);
    let decision = FacilitatorDecision { action: FacilitatorAction::AcknowledgeAndStay, message: text.clone() };
    let events = vec![
        user_message_event(&state, msg, &turn_id),
        NewEvent::new(
            EventKind::SystemMessage,
            &state.user_id,
            json!({
                "turn_id": turn_id,
                "text": text,
                "action": decision.action,
                "review": true,
                "calls": calls_json(&calls),
            }),
        )
        .session(session_id)
        .component(Component::Facilitator),
    ];
    let event_ids = engine.commit(&state, state.clone(), events)?;
    let reply = ResponderOutput { text, tool_directives: vec![], image_refs: vec![], fallback: false };
    let trace = PipelineTrace {
        intent: crate::pipeline::Intent {
            kind: crate::pipeline::IntentKind::ProgressCommand,
            confidence_note: "review mode".into(),
        },
        verdict: None,
        responder_outputs: vec![],
        decision: decision.clone(),
        gateway_calls: calls,
    };
    Ok(TurnResult { turn_id, reply, decision, trace, state, event_ids, summary: Some(summary) })
}
