//! One dialogue round: Filter → Judge(s) → Responder → Facilitator.
//!
//! The filter classifies the learner's intent, a panel of judges decides
//! which expectations the message covers, a responder writes the reply and
//! the facilitator picks the next dialogue action. Only the facilitator is
//! a pure function; the other three go through an [`LlmGateway`].

mod facilitator;
mod filter;
mod judge;
mod responder;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::content::{Expectation, ToolId};
use crate::gateway::{GatewayError, LlmGateway, LlmRequest, LlmResponse, RoleTag, TranscriptTurn};
use crate::events::Speaker;
use crate::prompts::PromptSet;

pub use facilitator::facilitate;
pub use filter::parse_intent;
pub use judge::{aggregate, parse_judge_output, ParsedJudgeOutput};
pub use responder::{parse_responder_output, ResponderInput, FALLBACK_HINT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResultPayload {
    pub tool_id: ToolId,
    #[serde(default)]
    pub data: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMessage {
    pub session_id: String,
    pub text: String,
    #[serde(default)]
    pub attached_tool_result: Option<ToolResultPayload>,
    #[serde(default)]
    pub client_timestamp: Option<i64>,
}

impl UserMessage {
    pub fn text(session_id: impl Into<String>, text: impl Into<String>) -> Self {
        UserMessage { session_id: session_id.into(), text: text.into(), attached_tool_result: None, client_timestamp: None }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() && self.attached_tool_result.is_none() {
            return Err("message text is empty".into());
        }
        Ok(())
    }

    pub(crate) fn tool_result_block(&self) -> String {
        match &self.attached_tool_result {
            Some(t) => format!("Tool result ({}): {}", t.tool_id, serde_json::to_string(&t.data).unwrap_or_default()),
            None => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntentKind {
    AnswerAttempt,
    Question,
    ToolResult,
    OffTopic,
    ProgressCommand,
}

impl IntentKind {
    pub fn is_assessed(self) -> bool {
        matches!(self, IntentKind::AnswerAttempt | IntentKind::ToolResult)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub kind: IntentKind,
    pub confidence_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_index: usize,
    pub covered: BTreeSet<String>,
    pub evidence: BTreeMap<String, String>,
    /// Ids the judge reported that are not candidates of this stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
    /// Output never contained a parsable `COVERED:` line, even after repair.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub malformed: bool,
}

impl JudgeVerdict {
    pub fn new(judge_index: usize, covered: &[&str]) -> Self {
        JudgeVerdict {
            judge_index,
            covered: covered.iter().map(|s| s.to_string()).collect(),
            evidence: covered.iter().map(|s| (s.to_string(), String::new())).collect(),
            dropped: vec![],
            malformed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AggregationRule {
    #[default]
    Union,
    Majority,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedVerdict {
    pub covered: BTreeSet<String>,
    pub per_judge: Vec<JudgeVerdict>,
    pub rule: AggregationRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDirective {
    pub tool_id: ToolId,
    pub trigger_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderOutput {
    pub text: String,
    pub tool_directives: Vec<ToolDirective>,
    pub image_refs: Vec<String>,
    /// The text is an authored hint used because the gateway failed.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FacilitatorAction {
    SendHint,
    AcknowledgeAndStay,
    AdvanceExpectation,
    SkipStage,
    CompleteActivity,
    AnswerSideQuestion,
    RedirectOffTopic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacilitatorDecision {
    pub action: FacilitatorAction,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayCall {
    pub role_tag: RoleTag,
    pub request_digest: String,
    pub latency_ms: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub intent: Intent,
    pub verdict: Option<AggregatedVerdict>,
    pub responder_outputs: Vec<ResponderOutput>,
    pub decision: FacilitatorDecision,
    pub gateway_calls: Vec<GatewayCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_judges: usize,
    pub rule: AggregationRule,
    /// Dialogue entries of history given to each agent.
    pub context_turns: usize,
    /// Consecutive non-covering turns before a stage is skipped.
    pub skip_threshold: u32,
    pub filter_temperature: f32,
    pub judge_temperature: f32,
    pub responder_temperature: f32,
    /// Base seed; judge `j` gets `seed + j`.
    pub seed: Option<i64>,
    pub responder_attempts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_judges: 3,
            rule: AggregationRule::Union,
            context_turns: 12,
            skip_threshold: 3,
            filter_temperature: 0.0,
            judge_temperature: 0.0,
            responder_temperature: 0.7,
            seed: Some(0),
            responder_attempts: 2,
        }
    }
}

/// The gateway, prompts and knobs every agent call needs.
#[derive(Clone, Copy)]
pub struct Agents<'a> {
    pub gateway: &'a dyn LlmGateway,
    pub prompts: &'a PromptSet,
    pub config: &'a PipelineConfig,
}

impl<'a> Agents<'a> {
    pub fn new(gateway: &'a dyn LlmGateway, prompts: &'a PromptSet, config: &'a PipelineConfig) -> Self {
        Agents { gateway, prompts, config }
    }

    pub(crate) fn call(
        &self,
        request: &LlmRequest,
        calls: &mut Vec<GatewayCall>,
    ) -> Result<LlmResponse, GatewayError> {
        let started = Instant::now();
        let result = self.gateway.complete(request);
        calls.push(GatewayCall {
            role_tag: request.role_tag,
            request_digest: request.digest(),
            latency_ms: started.elapsed().as_millis() as u64,
            ok: result.is_ok(),
        });
        result
    }
}

pub(crate) fn transcript_with(ctx: &[TranscriptTurn], msg: &UserMessage) -> Vec<TranscriptTurn> {
    let mut t = ctx.to_vec();
    t.push(TranscriptTurn::user(msg.text.clone()));
    t
}

pub(crate) fn render_transcript(ctx: &[TranscriptTurn]) -> String {
    if ctx.is_empty() {
        return "(no earlier messages)".into();
    }
    ctx.iter()
        .map(|t| match t.speaker {
            Speaker::User => format!("Teacher: {}", t.text),
            Speaker::System => format!("Tutor: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn render_expectations(exps: &[&Expectation]) -> String {
    if exps.is_empty() {
        return "(none)".into();
    }
    exps.iter()
        .map(|e| format!("- {}: {} | rubric: {}", e.id, e.statement, e.rubric))
        .collect::<Vec<_>>()
        .join("\n")
}
