use super::{AggregatedVerdict, FacilitatorAction, FacilitatorDecision, Intent, IntentKind, PipelineConfig};
use crate::engine::SessionState;

fn message(action: FacilitatorAction) -> &'static str {
    match action {
        FacilitatorAction::SendHint => "Not quite there yet. Here is something to think about.",
        FacilitatorAction::AcknowledgeAndStay => "Noted. Let's continue with the current question.",
        FacilitatorAction::AdvanceExpectation => "Good, that point is covered. Let's build on it.",
        FacilitatorAction::SkipStage => "Let's move on to the next part; we'll note this point to revisit.",
        FacilitatorAction::CompleteActivity => "You have covered everything in this activity.",
        FacilitatorAction::AnswerSideQuestion => "Good question. When you're ready, return to the task.",
        FacilitatorAction::RedirectOffTopic => "Let's bring the conversation back to the activity.",
    }
}

/// Chooses the next dialogue action. Pure: no gateway call, and the same
/// inputs always give the same decision.
pub fn facilitate(
    verdict: Option<&AggregatedVerdict>,
    intent: &Intent,
    state: &SessionState,
    config: &PipelineConfig,
) -> FacilitatorDecision {
    let action = match intent.kind {
        IntentKind::Question => FacilitatorAction::AnswerSideQuestion,
        IntentKind::OffTopic => FacilitatorAction::RedirectOffTopic,
        IntentKind::ProgressCommand => FacilitatorAction::AcknowledgeAndStay,
        IntentKind::AnswerAttempt | IntentKind::ToolResult => {
            let covered = verdict.map(|v| &v.covered);
            let newly = covered.is_some_and(|c| c.iter().any(|id| state.is_unmet(id)));
            if newly {
                let covered = covered.expect("checked above");
                let finished = state.expectation_status.iter().all(|(id, _)| !state.is_unmet(id) || covered.contains(id));
                if finished {
                    FacilitatorAction::CompleteActivity
                } else {
                    FacilitatorAction::AdvanceExpectation
                }
            } else if state.consecutive_misses >= config.skip_threshold {
                FacilitatorAction::SkipStage
            } else {
                FacilitatorAction::SendHint
            }
        }
    };
    FacilitatorDecision { action, message: message(action).to_string() }
}
