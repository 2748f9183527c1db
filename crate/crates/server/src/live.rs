//! Gateway to an OpenAI-compatible chat completions endpoint.

use std::time::Duration;

use serde_json::{json, Value};
use tutor_core::events::Speaker;
use tutor_core::gateway::{GatewayError, LlmGateway, LlmRequest, LlmResponse};

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Full URL of the chat completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads `GATEWAY_ENDPOINT`, `GATEWAY_API_KEY` and `GATEWAY_MODEL`.
    pub fn from_env() -> Result<Self, String> {
        let endpoint = std::env::var("GATEWAY_ENDPOINT").map_err(|_| "GATEWAY_ENDPOINT is not set".to_string())?;
        Ok(LiveConfig {
            endpoint,
            api_key: std::env::var("GATEWAY_API_KEY").ok().filter(|k| !k.is_empty()),
            model: std::env::var("GATEWAY_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into()),
            timeout: Duration::from_secs(60),
        })
    }
}

pub struct LiveGateway {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveGateway {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        LiveGateway { config, agent }
    }
}

/// Chat payload: system prompt first, then the transcript as user/assistant
/// turns.
pub fn request_body(model: &str, req: &LlmRequest) -> Value {
    let mut messages = vec![json!({ "role": "system", "content": req.system_prompt })];
    messages.extend(req.transcript.iter().map(|t| {
        let role = match t.speaker {
            Speaker::User => "user",
            Speaker::System => "assistant",
        };
        json!({ "role": role, "content": t.text })
    }));
    let mut body = json!({ "model": model, "messages": messages, "temperature": req.temperature });
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

fn extract_text(v: &Value) -> Option<String> {
    v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_string)
}

impl LlmGateway for LiveGateway {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        let mut call = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request_body(&self.config.model, request))
            .map_err(|e| GatewayError::Unavailable(e.to_string()))?;
        let body: Value = resp.body_mut().read_json().map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        extract_text(&body)
            .map(|text| LlmResponse { text })
            .ok_or_else(|| GatewayError::BadResponse("no choices[0].message.content".into()))
    }
}
