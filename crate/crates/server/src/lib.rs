//! HTTP service and command-line front end for the tutoring engine.

pub mod api;
pub mod auth;
pub mod live;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use tutor_core::content::{load_content_pack, ASSET_DIR};
use tutor_core::gateway::{LlmGateway, ScriptedGateway};
use tutor_core::{ActivityEngine, EventStore, PipelineConfig, PromptSet};

pub use api::{router, AppState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GatewayKind {
    Live,
    Scripted,
}

/// Builds the gateway named on the command line.
pub fn make_gateway(kind: GatewayKind, script: Option<&Path>) -> anyhow::Result<Arc<dyn LlmGateway>> {
    Ok(match kind {
        GatewayKind::Scripted => {
            let path = script.context("--script is required with --gateway scripted")?;
            Arc::new(ScriptedGateway::load(path).with_context(|| format!("loading script {}", path.display()))?)
        }
        GatewayKind::Live => Arc::new(live::LiveGateway::new(live::LiveConfig::from_env().map_err(anyhow::Error::msg)?)),
    })
}

pub struct ServeOptions {
    pub pack: PathBuf,
    /// Event log file; `None` keeps everything in memory.
    pub db: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub config: PipelineConfig,
    pub admin_token: Option<String>,
}

/// Loads the pack, opens the log and the account file, and wires the
/// service state.
pub fn build_state(opts: &ServeOptions, gateway: Arc<dyn LlmGateway>) -> anyhow::Result<Arc<AppState>> {
    let pack = load_content_pack(&opts.pack).with_context(|| format!("loading content pack {}", opts.pack.display()))?;
    let (store, auth) = match &opts.db {
        Some(db) => {
            let store = EventStore::open(db).with_context(|| format!("opening event log {}", db.display()))?;
            let auth = auth::AuthStore::open(db.with_extension("users.json"), opts.admin_token.clone())?;
            (store, auth)
        }
        None => (EventStore::in_memory(), auth::AuthStore::in_memory(opts.admin_token.clone())),
    };
    let prompts = match &opts.prompts {
        Some(dir) => PromptSet::load_dir(dir).with_context(|| format!("loading prompts from {}", dir.display()))?,
        None => PromptSet::default(),
    };
    let engine = Arc::new(ActivityEngine::new(Arc::new(pack), Arc::new(store)));
    Ok(Arc::new(AppState::new(engine, gateway, prompts, opts.config.clone(), auth, Some(opts.pack.join(ASSET_DIR)))))
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
