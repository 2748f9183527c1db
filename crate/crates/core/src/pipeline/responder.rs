use super::{
    render_expectations, render_transcript, transcript_with, AggregatedVerdict, Agents, GatewayCall, Intent,
    ResponderOutput, ToolDirective, UserMessage,
};
use crate::content::{Activity, Expectation, Stage, ToolId, ToolTrigger};
use crate::engine::SessionState;
use crate::gateway::{GatewayError, LlmRequest, RoleTag, TranscriptTurn};

/// Used when the stage has no authored hints and the gateway is down.
pub const FALLBACK_HINT: &str = "Take another look at the question. What relationship between the quantities do you notice?";

/// Everything the responder needs, decoupled from session storage so the
/// offline harness can drive it from a failure case.
#[derive(Debug, Clone)]
pub struct ResponderInput<'a> {
    pub question: &'a str,
    pub intent: &'a Intent,
    pub missing: Vec<&'a Expectation>,
    pub hints: &'a [String],
    /// Index of the next authored hint not yet used.
    pub hint_index: usize,
    pub requestable_tools: Vec<ToolId>,
    pub miss_tools: Vec<ToolId>,
    pub images: &'a [String],
    pub msg: &'a UserMessage,
    pub ctx: &'a [TranscriptTurn],
}

impl<'a> ResponderInput<'a> {
    pub fn for_session(
        intent: &'a Intent,
        verdict: Option<&AggregatedVerdict>,
        state: &SessionState,
        activity: &'a Activity,
        stage: &'a Stage,
        msg: &'a UserMessage,
        ctx: &'a [TranscriptTurn],
    ) -> Self {
        let covered = |id: &str| verdict.is_some_and(|v| v.covered.contains(id));
        let missing = stage.expectations.iter().filter(|e| state.is_unmet(&e.id) && !covered(&e.id)).collect();
        let by_trigger = |t: ToolTrigger| stage.tool_bindings.iter().filter(move |b| b.trigger == t).map(|b| b.tool_id);
        let mut requestable: Vec<ToolId> =
            by_trigger(ToolTrigger::OnDemand).chain(by_trigger(ToolTrigger::OnJudgeMiss)).collect();
        requestable.push(ToolId::Notebook);
        ResponderInput {
            question: &activity.question_text,
            intent,
            missing,
            hints: &stage.hint_templates,
            hint_index: state.consecutive_misses as usize,
            requestable_tools: requestable,
            miss_tools: by_trigger(ToolTrigger::OnJudgeMiss).collect(),
            images: &activity.image_refs,
            msg,
            ctx,
        }
    }

    fn judged_miss(&self) -> bool {
        self.intent.kind.is_assessed() && !self.missing.is_empty()
    }

    fn fallback_text(&self) -> String {
        match self.hints.len() {
            0 => FALLBACK_HINT.to_string(),
            n => self.hints[self.hint_index.min(n - 1)].clone(),
        }
    }
}

/// Splits responder output into reply text, `TOOL:` requests and `IMAGE:`
/// references. Requests outside the allowed sets are discarded.
pub fn parse_responder_output(raw: &str, tools: &[ToolId], images: &[String]) -> ResponderOutput {
    let mut text = Vec::new();
    let mut directives: Vec<ToolDirective> = Vec::new();
    let mut image_refs = Vec::new();
    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(rest) = strip_prefix_ci(trimmed, "TOOL:") {
            match ToolId::parse(rest) {
                Some(t) if tools.contains(&t) && !directives.iter().any(|d| d.tool_id == t) => {
                    directives.push(ToolDirective { tool_id: t, trigger_reason: "requested".into() })
                }
                _ => tracing::debug!(tool = rest, "ignoring tool request"),
            }
        } else if let Some(rest) = strip_prefix_ci(trimmed, "IMAGE:") {
            let r = rest.trim().to_string();
            if images.contains(&r) && !image_refs.contains(&r) {
                image_refs.push(r);
            }
        } else {
            text.push(line);
        }
    }
    ResponderOutput { text: text.join("\n").trim().to_string(), tool_directives: directives, image_refs, fallback: false }
}

fn strip_prefix_ci<'s>(s: &'s str, prefix: &str) -> Option<&'s str> {
    (s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix)).then(|| &s[prefix.len()..])
}

impl Agents<'_> {
    /// Always produces a reply: after `responder_attempts` failed calls the
    /// next unused authored hint is returned verbatim.
    pub fn generate_response(&self, input: &ResponderInput<'_>, calls: &mut Vec<GatewayCall>) -> ResponderOutput {
        let tool_names = input.requestable_tools.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(", ");
        let image_names = if input.images.is_empty() { "none available".to_string() } else { input.images.join(", ") };
        let hints = input.hints.iter().map(|h| format!("- {h}")).collect::<Vec<_>>().join("\n");
        let intent = format!("{:?}", input.intent.kind);
        let system_prompt = self.prompts.render(
            RoleTag::Responder,
            &[
                ("question", input.question),
                ("missing", &render_expectations(&input.missing)),
                ("hints", &hints),
                ("transcript", &render_transcript(input.ctx)),
                ("intent", &intent),
                ("tool_result", &input.msg.tool_result_block()),
                ("tools", &tool_names),
                ("images", &image_names),
                ("message", &input.msg.text),
            ],
        );
        let request = LlmRequest {
            role_tag: RoleTag::Responder,
            system_prompt,
            transcript: transcript_with(input.ctx, input.msg),
            temperature: self.config.responder_temperature,
            seed: self.config.seed,
        };

        let mut out = None;
        for attempt in 0..self.config.responder_attempts.max(1) {
            let result = self.call(&request, calls).and_then(|r| {
                let parsed = parse_responder_output(&r.text, &input.requestable_tools, input.images);
                if parsed.text.is_empty() {
                    Err(GatewayError::BadResponse("empty responder text".into()))
                } else {
                    Ok(parsed)
                }
            });
            match result {
                Ok(parsed) => {
                    out = Some(parsed);
                    break;
                }
                Err(e) => tracing::warn!(attempt, error = %e, "responder call failed"),
            }
        }
        let mut out = out.unwrap_or_else(|| ResponderOutput {
            text: input.fallback_text(),
            tool_directives: vec![],
            image_refs: vec![],
            fallback: true,
        });
        if input.judged_miss() {
            for tool in &input.miss_tools {
                if !out.tool_directives.iter().any(|d| d.tool_id == *tool) {
                    out.tool_directives.push(ToolDirective { tool_id: *tool, trigger_reason: "on_judge_miss".into() });
                }
            }
        }
        out
    }
}
