use std::sync::LazyLock;

use regex::Regex;

use super::{render_expectations, render_transcript, transcript_with, Agents, GatewayCall, Intent, IntentKind, UserMessage};
use crate::content::Expectation;
use crate::gateway::{GatewayError, LlmRequest, RoleTag, TranscriptTurn};

static INTENT_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(ANSWER|QUESTION|OFF[_ -]?TOPIC|PROGRESS|TOOL[_ ]?RESULT)\b").unwrap()
});

/// Extracts the intent label from filter output. The first recognised
/// token wins.
pub fn parse_intent(text: &str) -> Option<IntentKind> {
    let token = INTENT_TOKEN.captures(text)?.get(1)?.as_str().to_ascii_uppercase();
    let kind = match token.as_str() {
        "ANSWER" => IntentKind::AnswerAttempt,
        "QUESTION" => IntentKind::Question,
        "PROGRESS" => IntentKind::ProgressCommand,
        t if t.starts_with("OFF") => IntentKind::OffTopic,
        _ => IntentKind::ToolResult,
    };
    Some(kind)
}

const REPAIR: &str = "Reply with one line only: INTENT: <ANSWER|QUESTION|OFFTOPIC|PROGRESS>";

impl Agents<'_> {
    /// Tool submissions are classified without a gateway call.
    pub fn classify_intent(
        &self,
        msg: &UserMessage,
        question: &str,
        candidates: &[&Expectation],
        ctx: &[TranscriptTurn],
        calls: &mut Vec<GatewayCall>,
    ) -> Result<Intent, GatewayError> {
        if let Some(tool) = &msg.attached_tool_result {
            return Ok(Intent { kind: IntentKind::ToolResult, confidence_note: format!("{} submission", tool.tool_id) });
        }
        let system_prompt = self.prompts.render(
            RoleTag::Filter,
            &[
                ("question", question),
                ("expectations", &render_expectations(candidates)),
                ("transcript", &render_transcript(ctx)),
                ("message", &msg.text),
            ],
        );
        let mut request = LlmRequest {
            role_tag: RoleTag::Filter,
            system_prompt,
            transcript: transcript_with(ctx, msg),
            temperature: self.config.filter_temperature,
            seed: self.config.seed,
        };
        let first = self.call(&request, calls)?;
        if let Some(kind) = parse_intent(&first.text) {
            return Ok(Intent { kind, confidence_note: first.text.trim().to_string() });
        }
        request.transcript.push(TranscriptTurn::system(first.text));
        request.transcript.push(TranscriptTurn::user(REPAIR));
        let second = self.call(&request, calls)?;
        Ok(match parse_intent(&second.text) {
            Some(kind) => Intent { kind, confidence_note: second.text.trim().to_string() },
            None => {
                tracing::warn!(output = %second.text, "unparsable filter output, assuming an answer attempt");
                Intent { kind: IntentKind::AnswerAttempt, confidence_note: "unparsed filter output".into() }
            }
        })
    }
}
