//! Core of the tutoring service: curriculum content, the four-agent
//! dialogue pipeline, the activity state machine, the event log,
//! diagnosis tests, feedback tallies and the offline evaluation harness.

pub mod content;
pub mod diagnosis;
pub mod engine;
pub mod events;
pub mod feedback;
pub mod gateway;
pub mod harness;
pub mod pipeline;
pub mod prompts;
pub mod turn;

pub use content::{load_content_pack, validate_content_pack, ContentPack};
pub use engine::{ActivityEngine, SessionState};
pub use events::{EventStore, NewEvent};
pub use gateway::{LlmGateway, ScriptedGateway};
pub use pipeline::{Agents, PipelineConfig, UserMessage};
pub use prompts::PromptSet;
pub use turn::{review_turn, run_turn, TurnResult};
