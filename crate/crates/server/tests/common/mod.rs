#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use reqwest::StatusCode;
use serde_json::{json, Value};
use tutor_core::content::{fixtures, ContentPack, ToolBinding, ToolId, ToolTrigger};
use tutor_core::events::ManualClock;
use tutor_core::gateway::{LlmGateway, RoleTag, ScriptRule, ScriptedGateway};
use tutor_core::{ActivityEngine, EventStore, PipelineConfig, PromptSet};
use tutor_server::auth::AuthStore;
use tutor_server::AppState;

pub const ADMIN_TOKEN: &str = "admin-secret";

/// Judges cover e1/e2/e3 on fixed phrases; anything containing "slow" takes
/// half a second in the filter.
pub fn script() -> Vec<ScriptRule> {
    vec![
        ScriptRule::respond(RoleTag::Filter, "(?i)slow", "INTENT: ANSWER").with_latency(500),
        ScriptRule::respond(RoleTag::Filter, "(?i)^what is", "INTENT: QUESTION"),
        ScriptRule::respond(RoleTag::Filter, "", "INTENT: ANSWER"),
        ScriptRule::fail(RoleTag::Judge, "(?i)broken", "upstream down"),
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

/// The five learner messages that walk M-1 to completion, with the action
/// each one should produce.
pub const TRANSCRIPT: [(&str, &str); 5] = [
    ("What is a ratio?", "AnswerSideQuestion"),
    ("the speed doubles", "AdvanceExpectation"),
    ("not sure", "SendHint"),
    ("the time doubles too", "AdvanceExpectation"),
    ("so the ratio stays the same", "CompleteActivity"),
];

/// One module, two activities with stages {e1,e2},{e3}. M-1 has an image,
/// a two-line board on entry and a fill-table board on judge misses.
pub fn pack() -> ContentPack {
    let mut module = fixtures::module("M", 2);
    let a = &mut module.activities[0];
    a.image_refs = vec!["ratio.svg".into()];
    a.stages[0].tool_bindings = vec![
        ToolBinding { tool_id: ToolId::TwoLine, trigger: ToolTrigger::AutoOnEnter },
        ToolBinding { tool_id: ToolId::FillTable, trigger: ToolTrigger::OnJudgeMiss },
    ];
    fixtures::pack(vec![module])
}

pub fn engine(pack: ContentPack) -> Arc<ActivityEngine> {
    let store = EventStore::in_memory_with_clock(Arc::new(ManualClock::new(1_700_000_000_000, 1000)));
    Arc::new(ActivityEngine::new(Arc::new(pack), Arc::new(store)))
}

pub fn app_state(gateway: Arc<dyn LlmGateway>, asset_dir: Option<&Path>) -> Arc<AppState> {
    Arc::new(AppState::new(
        engine(pack()),
        gateway,
        PromptSet::default(),
        PipelineConfig::default(),
        AuthStore::in_memory(Some(ADMIN_TOKEN.into())),
        asset_dir.map(Path::to_path_buf),
    ))
}

pub fn scripted_state(asset_dir: Option<&Path>) -> Arc<AppState> {
    app_state(Arc::new(ScriptedGateway::new(script()).unwrap()), asset_dir)
}

/// Serves `state` on an ephemeral port of the current runtime.
pub async fn spawn(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, tutor_server::router(state)).await.unwrap();
    });
    format!("http://{addr}")
}

#[derive(Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    token: Option<String>,
}

pub type Reply = (StatusCode, Value);

impl Client {
    pub fn new(base: &str) -> Self {
        Client { http: reqwest::Client::new(), base: base.to_string(), token: None }
    }

    pub fn with_token(&self, token: &str) -> Self {
        Client { token: Some(token.to_string()), ..self.clone() }
    }

    pub fn admin(&self) -> Self {
        self.with_token(ADMIN_TOKEN)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn send(&self, rb: reqwest::RequestBuilder) -> Reply {
        let resp = self.auth(rb).send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        let body = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        (status, body)
    }

    pub async fn get(&self, path: &str) -> Reply {
        self.send(self.http.get(self.url(path))).await
    }

    pub async fn get_text(&self, path: &str) -> (StatusCode, String) {
        let resp = self.auth(self.http.get(self.url(path))).send().await.unwrap();
        (resp.status(), resp.text().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: Value) -> Reply {
        self.send(self.http.post(self.url(path)).json(&body)).await
    }

    pub async fn put(&self, path: &str, body: Value) -> Reply {
        self.send(self.http.put(self.url(path)).json(&body)).await
    }

    /// Registers and logs in; returns a client carrying the token.
    pub async fn user(&self, name: &str) -> Client {
        let (st, _) = self.post("/api/v1/auth/register", json!({"username": name, "password": "pw"})).await;
        assert_eq!(st, StatusCode::CREATED);
        let (st, body) = self.post("/api/v1/auth/login", json!({"username": name, "password": "pw"})).await;
        assert_eq!(st, StatusCode::OK);
        self.with_token(body["token"].as_str().unwrap())
    }

    pub async fn say(&self, activity: &str, text: &str) -> Reply {
        self.post(&format!("/api/v1/activity/{activity}/message"), json!({ "text": text })).await
    }
}
