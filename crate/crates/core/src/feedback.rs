//! Up/down votes on system bubbles and tool panels, and the per-component
//! satisfaction table built from them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::events::{Component, EventError, EventKind, EventRecord, EventStore, NewEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Up,
    Down,
}

impl Vote {
    pub fn parse(s: &str) -> Option<Vote> {
        match s.trim().to_ascii_lowercase().as_str() {
            "up" => Some(Vote::Up),
            "down" => Some(Vote::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("event {0} not found")]
    TargetNotFound(u64),
    #[error("event {0} cannot be rated")]
    NotRatable(u64),
    #[error(transparent)]
    Store(#[from] EventError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub user_id: String,
    pub target_event_id: u64,
    pub vote: Vote,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub component: Option<Component>,
}

fn ratable(e: &EventRecord) -> bool {
    matches!(e.kind, EventKind::SystemMessage | EventKind::ToolEvent)
}

/// Appends a vote. Earlier votes by the same user on the same target stay in
/// the log but no longer count.
pub fn record_feedback(
    store: &EventStore,
    user_id: &str,
    target_event_id: u64,
    vote: Vote,
    note: Option<&str>,
) -> Result<u64, FeedbackError> {
    let target = store.get(target_event_id).ok_or(FeedbackError::TargetNotFound(target_event_id))?;
    if !ratable(&target) {
        return Err(FeedbackError::NotRatable(target_event_id));
    }
    let mut ev = NewEvent::new(
        EventKind::Feedback,
        user_id,
        json!({ "target_event_id": target_event_id, "vote": vote, "note": note }),
    );
    if let Some(s) = &target.session_id {
        ev = ev.session(s);
    }
    if let Some(c) = target.component {
        ev = ev.component(c);
    }
    Ok(store.append(ev)?)
}

#[derive(Deserialize)]
struct FeedbackPayload {
    target_event_id: u64,
    vote: Vote,
    #[serde(default)]
    note: Option<String>,
}

/// The vote in force for every (user, target) pair, in log order of the
/// first vote.
pub fn latest_votes(events: &[EventRecord]) -> Vec<FeedbackRecord> {
    let mut index: HashMap<(String, u64), usize> = HashMap::new();
    let mut out: Vec<FeedbackRecord> = Vec::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Feedback) {
        let Some(p) = e.payload_as::<FeedbackPayload>() else { continue };
        let rec = FeedbackRecord {
            user_id: e.user_id.clone(),
            target_event_id: p.target_event_id,
            vote: p.vote,
            note: p.note,
            component: e.component,
        };
        match index.get(&(e.user_id.clone(), p.target_event_id)) {
            Some(&i) => out[i] = rec,
            None => {
                index.insert((e.user_id.clone(), p.target_event_id), out.len());
                out.push(rec);
            }
        }
    }
    out
}

/// `round(100 * positive / (positive + negative), 2)`, rounding half up.
/// `None` when nobody voted.
pub fn pct_positive(positive: u64, negative: u64) -> Option<f64> {
    let total = positive + negative;
    if total == 0 {
        return None;
    }
    let hundredths = (20_000 * positive + total) / (2 * total);
    Some(hundredths as f64 / 100.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub responses: u64,
    pub positive: u64,
    pub negative: u64,
    pub pct_positive: Option<f64>,
}

impl ComponentStats {
    fn add(&mut self, vote: Vote) {
        match vote {
            Vote::Up => self.positive += 1,
            Vote::Down => self.negative += 1,
        }
    }

    fn finish(&mut self) {
        self.pct_positive = pct_positive(self.positive, self.negative);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStats {
    pub components: BTreeMap<Component, ComponentStats>,
    pub total: ComponentStats,
}

pub fn feedback_stats(events: &[EventRecord]) -> FeedbackStats {
    let mut components: BTreeMap<Component, ComponentStats> =
        Component::ALL.iter().map(|c| (*c, ComponentStats::default())).collect();
    let mut total = ComponentStats::default();
    for e in events.iter().filter(|e| ratable(e)) {
        total.responses += 1;
        if let Some(c) = e.component {
            components.entry(c).or_default().responses += 1;
        }
    }
    for v in latest_votes(events) {
        total.add(v.vote);
        if let Some(c) = v.component {
            components.entry(c).or_default().add(v.vote);
        }
    }
    components.values_mut().for_each(ComponentStats::finish);
    total.finish();
    FeedbackStats { components, total }
}

fn fmt_pct(p: Option<f64>) -> String {
    p.map_or_else(|| "—".to_string(), |p| format!("{p:.2}"))
}

impl fmt::Display for FeedbackStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>8}", "component", "responses", "positive", "negative", "%")?;
        let rows = self.components.iter().map(|(c, s)| (format!("{c:?}"), s));
        for (name, s) in rows.chain(std::iter::once(("Total".to_string(), &self.total))) {
            writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>8}", name, s.responses, s.positive, s.negative, fmt_pct(s.pct_positive))?;
        }
        Ok(())
    }
}
