//! LLM gateway contract and the deterministic scripted implementation.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::Speaker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Filter,
    Judge,
    Responder,
    Facilitator,
    RubricOpt,
}

impl RoleTag {
    pub const ALL: [RoleTag; 5] =
        [RoleTag::Filter, RoleTag::Judge, RoleTag::Responder, RoleTag::Facilitator, RoleTag::RubricOpt];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Filter => "filter",
            RoleTag::Judge => "judge",
            RoleTag::Responder => "responder",
            RoleTag::Facilitator => "facilitator",
            RoleTag::RubricOpt => "rubric_opt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl TranscriptTurn {
    pub fn user(text: impl Into<String>) -> Self {
        TranscriptTurn { speaker: Speaker::User, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        TranscriptTurn { speaker: Speaker::System, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub role_tag: RoleTag,
    pub system_prompt: String,
    /// Oldest first.
    pub transcript: Vec<TranscriptTurn>,
    pub temperature: f32,
    pub seed: Option<i64>,
}

impl LlmRequest {
    pub fn last_user_text(&self) -> &str {
        self.transcript
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::User)
            .map(|t| t.text.as_str())
            .unwrap_or("")
    }

    /// Short stable fingerprint used in traces.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("gateway unavailable: {0}")]
    Unavailable(String),
    #[error("no scripted response for role {role} and text {text:?}")]
    NoScriptMatch { role: &'static str, text: String },
    #[error("gateway returned an invalid response: {0}")]
    BadResponse(String),
}

/// Anything that turns a prompt into text. Implementations must tolerate
/// concurrent calls.
pub trait LlmGateway: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError>;
}

impl<G: LlmGateway + ?Sized> LlmGateway for std::sync::Arc<G> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: LlmGateway + ?Sized> LlmGateway for &G {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// One line of a gateway script.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub role: RoleTag,
    /// Regex searched in the last user turn of the transcript.
    #[serde(default = "match_all")]
    pub pattern: String,
    /// When set, the rule only applies to requests carrying this seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default)]
    pub response: String,
    /// When set, the call fails with this message instead of responding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

fn match_all() -> String {
    String::new()
}

impl ScriptRule {
    pub fn respond(role: RoleTag, pattern: &str, response: &str) -> Self {
        ScriptRule {
            role,
            pattern: pattern.into(),
            seed: None,
            response: response.into(),
            error: None,
            latency_ms: None,
        }
    }

    pub fn fail(role: RoleTag, pattern: &str, message: &str) -> Self {
        ScriptRule { error: Some(message.into()), ..ScriptRule::respond(role, pattern, "") }
    }

    pub fn with_seed(mut self, seed: i64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = Some(ms);
        self
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("rule {index}: bad pattern: {source}")]
    Pattern { index: usize, source: regex::Error },
}

/// Replays canned responses. Rules are tried in file order and the first
/// one whose role, seed and pattern match wins.
#[derive(Debug)]
pub struct ScriptedGateway {
    rules: Vec<(ScriptRule, Regex)>,
}

impl ScriptedGateway {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, ScriptError> {
        let rules = rules
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                let re = Regex::new(&r.pattern).map_err(|source| ScriptError::Pattern { index, source })?;
                Ok((r, re))
            })
            .collect::<Result<_, ScriptError>>()?;
        Ok(ScriptedGateway { rules })
    }

    /// Script files are a JSON array of rules.
    pub fn from_json(json: &str) -> Result<Self, ScriptError> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl LlmGateway for ScriptedGateway {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        let text = request.last_user_text();
        let rule = self.rules.iter().find(|(r, re)| {
            r.role == request.role_tag && r.seed.is_none_or(|s| Some(s) == request.seed) && re.is_match(text)
        });
        let Some((rule, _)) = rule else {
            return Err(GatewayError::NoScriptMatch { role: request.role_tag.as_str(), text: text.to_string() });
        };
        if let Some(ms) = rule.latency_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        match &rule.error {
            Some(msg) => Err(GatewayError::Unavailable(msg.clone())),
            None => Ok(LlmResponse { text: rule.response.clone() }),
        }
    }
}

/// Gateway backed by a closure; handy for fault injection in tests.
pub struct FnGateway<F>(pub F);

impl<F> LlmGateway for FnGateway<F>
where
    F: Fn(&LlmRequest) -> Result<LlmResponse, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        (self.0)(request)
    }
}

/// Wraps a gateway and keeps every request it forwards.
pub struct RecordingGateway<G> {
    inner: G,
    requests: Mutex<Vec<LlmRequest>>,
}

impl<G: LlmGateway> RecordingGateway<G> {
    pub fn new(inner: G) -> Self {
        RecordingGateway { inner, requests: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count(&self, role: RoleTag) -> usize {
        self.requests.lock().unwrap().iter().filter(|r| r.role_tag == role).count()
    }
}

impl<G: LlmGateway> LlmGateway for RecordingGateway<G> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.complete(request)
    }
}
