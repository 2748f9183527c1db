use std::sync::Arc;

use serde_json::json;
use tutor_core::content::fixtures;
use tutor_core::content::{ToolBinding, ToolId, ToolTrigger};
use tutor_core::engine::{replay_sessions, ActivityStatus, ExpectationStatus, Lifecycle};
use tutor_core::events::{Component, EventKind, EventStore, ManualClock};
use tutor_core::gateway::{RecordingGateway, RoleTag, ScriptRule, ScriptedGateway};
use tutor_core::pipeline::{FacilitatorAction, ToolResultPayload};
use tutor_core::turn::TurnError;
use tutor_core::{review_turn, run_turn, ActivityEngine, Agents, PipelineConfig, PromptSet, UserMessage};

fn script() -> Vec<ScriptRule> {
    vec![
        ScriptRule::respond(RoleTag::Filter, "(?i)^what is", "INTENT: QUESTION"),
        ScriptRule::respond(RoleTag::Filter, "", "INTENT: ANSWER"),
        ScriptRule::respond(RoleTag::Judge, "(?i)speed doubles", "EVIDENCE e1: \"speed doubles\"\nCOVERED: e1"),
        ScriptRule::respond(RoleTag::Judge, "(?i)time doubles", "COVERED: e2"),
        ScriptRule::respond(RoleTag::Judge, "(?i)ratio stays", "COVERED: e3"),
        ScriptRule::respond(RoleTag::Judge, "(?i)cells", "COVERED: e1"),
        ScriptRule::respond(RoleTag::Judge, "", "COVERED: none"),
        ScriptRule::respond(RoleTag::Responder, "(?i)^what is", "A ratio compares two quantities."),
        ScriptRule::respond(RoleTag::Responder, "", "Keep going."),
        ScriptRule::respond(RoleTag::Facilitator, "", "You already finished this one."),
    ]
}

struct World {
    engine: ActivityEngine,
    gateway: RecordingGateway<ScriptedGateway>,
    prompts: PromptSet,
    config: PipelineConfig,
}

impl World {
    fn new(rules: Vec<ScriptRule>) -> Self {
        let mut module = fixtures::module("M", 1);
        module.activities[0].stages[0]
            .tool_bindings
            .push(ToolBinding { tool_id: ToolId::FillTable, trigger: ToolTrigger::OnJudgeMiss });
        let pack = Arc::new(fixtures::pack(vec![module]));
        let store = Arc::new(EventStore::in_memory_with_clock(Arc::new(ManualClock::new(1_700_000_000_000, 1000))));
        World {
            engine: ActivityEngine::new(pack, store),
            gateway: RecordingGateway::new(ScriptedGateway::new(rules).unwrap()),
            prompts: PromptSet::default(),
            config: PipelineConfig::default(),
        }
    }

    fn agents(&self) -> Agents<'_> {
        Agents::new(&self.gateway, &self.prompts, &self.config)
    }

    fn say(&self, sid: &str, text: &str) -> Result<tutor_core::TurnResult, TurnError> {
        run_turn(&self.engine, self.agents(), sid, &UserMessage::text(sid, text))
    }
}

#[test]
fn five_message_session_completes_and_replays() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    assert_eq!(w.engine.progress_view("t1").status("M-1"), Some(ActivityStatus::Attempted));

    let transcript = [
        ("What is a ratio?", FacilitatorAction::AnswerSideQuestion),
        ("the speed doubles", FacilitatorAction::AdvanceExpectation),
        ("not sure", FacilitatorAction::SendHint),
        ("the time doubles too", FacilitatorAction::AdvanceExpectation),
        ("so the ratio stays the same", FacilitatorAction::CompleteActivity),
    ];
    let mut last = None;
    for (text, want) in transcript {
        let r = w.say(&s.session_id, text).unwrap();
        assert_eq!(r.decision.action, want, "{text}");
        last = Some(r);
    }
    let last = last.unwrap();
    assert_eq!(last.state.lifecycle, Lifecycle::Completed);
    assert!(last.state.expectation_status.values().all(|s| *s == ExpectationStatus::Met));
    let summary = last.summary.unwrap();
    assert!(summary.starts_with("Summary of Title M-1"));
    assert_eq!(last.decision.message, summary);

    let progress = w.engine.progress_view("t1");
    assert_eq!(progress.status("M-1"), Some(ActivityStatus::Completed));
    assert!(progress.diagnosis_unlocked("M-D"));

    // export, import, rebuild
    let mut buf = Vec::new();
    w.engine.store().write_export(&mut buf, &Default::default(), false).unwrap();
    let store = Arc::new(EventStore::import(buf.as_slice()).unwrap());
    let rebuilt = ActivityEngine::new(w.engine.pack().clone(), store.clone());
    assert_eq!(rebuilt.session(&s.session_id).unwrap(), last.state);
    assert_eq!(rebuilt.progress_view("t1"), progress);
    let replayed = store.read(|e| replay_sessions(w.engine.pack(), e));
    assert_eq!(replayed[&s.session_id], last.state);
}

#[test]
fn turn_events_are_contiguous_and_ordered() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    let r = w.say(&s.session_id, "not sure").unwrap();
    let events: Vec<_> = r.event_ids.iter().map(|id| w.engine.store().get(*id).unwrap()).collect();
    let shape: Vec<(EventKind, Option<Component>)> = events.iter().map(|e| (e.kind, e.component)).collect();
    assert_eq!(
        shape,
        vec![
            (EventKind::UserMessage, None),
            (EventKind::SystemMessage, Some(Component::Filter)),
            (EventKind::SystemMessage, Some(Component::Judger)),
            (EventKind::SystemMessage, Some(Component::Responder)),
            (EventKind::ToolEvent, Some(Component::Tools)),
            (EventKind::SystemMessage, Some(Component::Facilitator)),
            (EventKind::StateTransition, None),
        ]
    );
    assert!(r.event_ids.windows(2).all(|w| w[1] == w[0] + 1));
    assert!(events.iter().all(|e| e.str_field("turn_id") == Some(r.turn_id.as_str())));
    assert_eq!(events[2].str_field("text"), Some("covered: none"));
    assert_eq!(r.reply.tool_directives[0].tool_id, ToolId::FillTable);
    // filter once, three judges, responder once
    assert_eq!(w.gateway.count(RoleTag::Filter), 1);
    assert_eq!(w.gateway.count(RoleTag::Judge), 3);
    assert_eq!(w.gateway.count(RoleTag::Responder), 1);
}

#[test]
fn judge_failure_leaves_state_untouched() {
    let mut rules = vec![ScriptRule::fail(RoleTag::Judge, "(?i)boom", "upstream 503")];
    rules.extend(script());
    let w = World::new(rules);
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    w.say(&s.session_id, "the speed doubles").unwrap();
    let before_state = w.engine.session(&s.session_id).unwrap();
    let before_len = w.engine.store().len();

    let err = w.say(&s.session_id, "boom").unwrap_err();
    assert!(matches!(err, TurnError::Gateway { step: "judge", .. }));
    assert_eq!(w.engine.session(&s.session_id).unwrap(), before_state);
    assert_eq!(w.engine.store().len(), before_len + 1);
    let last = w.engine.store().get(before_len as u64 + 1).unwrap();
    assert_eq!(last.kind, EventKind::TurnFailed);
    assert_eq!(last.str_field("step"), Some("judge"));

    // the session carries on normally afterwards
    let r = w.say(&s.session_id, "the time doubles").unwrap();
    assert_eq!(r.decision.action, FacilitatorAction::AdvanceExpectation);
}

#[test]
fn responder_outage_falls_back_to_hint_and_commits() {
    let mut rules = vec![ScriptRule::fail(RoleTag::Responder, "", "timeout")];
    rules.extend(script());
    let w = World::new(rules);
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    let r = w.say(&s.session_id, "not sure").unwrap();
    assert!(r.reply.fallback);
    assert_eq!(r.reply.text, "hint for s1");
    assert_eq!(r.state.consecutive_misses, 1);
}

#[test]
fn tool_result_skips_filter_and_reaches_judges() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    let msg = UserMessage {
        session_id: s.session_id.clone(),
        text: "filled the cells".into(),
        attached_tool_result: Some(ToolResultPayload {
            tool_id: ToolId::FillTable,
            data: json!({"cells": [[2, 4], [3, 6]]}),
        }),
        client_timestamp: None,
    };
    let r = run_turn(&w.engine, w.agents(), &s.session_id, &msg).unwrap();
    assert_eq!(r.decision.action, FacilitatorAction::AdvanceExpectation);
    assert_eq!(w.gateway.count(RoleTag::Filter), 0);
    let judge = w.gateway.requests().into_iter().find(|q| q.role_tag == RoleTag::Judge).unwrap();
    assert!(judge.system_prompt.contains(r#"Tool result (fill_table): {"cells":[[2,4],[3,6]]}"#));
}

#[test]
fn three_misses_skip_the_stage() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    let actions: Vec<_> = (0..4).map(|_| w.say(&s.session_id, "no idea").unwrap().decision.action).collect();
    assert_eq!(
        actions,
        vec![
            FacilitatorAction::SendHint,
            FacilitatorAction::SendHint,
            FacilitatorAction::SendHint,
            FacilitatorAction::SkipStage
        ]
    );
    let st = w.engine.session(&s.session_id).unwrap();
    assert_eq!(st.stage_index, 1);
    assert_eq!(st.status("e1"), Some(ExpectationStatus::Skipped));
}

#[test]
fn completed_sessions_reject_run_turn_but_allow_review() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    for t in ["the speed doubles", "the time doubles", "the ratio stays"] {
        w.say(&s.session_id, t).unwrap();
    }
    assert!(matches!(w.say(&s.session_id, "hello"), Err(TurnError::SessionCompleted(_))));
    let before = w.engine.session(&s.session_id).unwrap();
    let r = review_turn(&w.engine, w.agents(), &s.session_id, &UserMessage::text(&s.session_id, "one more thing")).unwrap();
    assert_eq!(r.decision.action, FacilitatorAction::AcknowledgeAndStay);
    assert_eq!(r.reply.text, "You already finished this one.");
    assert_eq!(w.engine.session(&s.session_id).unwrap(), before);
}

#[test]
fn dialogue_context_reaches_later_turns() {
    let w = World::new(script());
    let s = w.engine.start_or_resume("t1", "M-1").unwrap();
    w.say(&s.session_id, "the speed doubles").unwrap();
    w.say(&s.session_id, "hmm").unwrap();
    let last_filter = w.gateway.requests().into_iter().rfind(|q| q.role_tag == RoleTag::Filter).unwrap();
    assert!(last_filter.system_prompt.contains("Teacher: the speed doubles"));
    assert!(last_filter.system_prompt.contains("Tutor: Keep going."));
    assert_eq!(last_filter.last_user_text(), "hmm");
}
