//! Append-only event log.
//!
//! Every user and system behavior is recorded as an [`EventRecord`] with a
//! store-assigned id and a server-clock timestamp. The log is the source of
//! truth: session state, progress and diagnosis attempts are all replayable
//! from it.
//!
//! The file backend is a JSON-lines log. Each append (or batch) is written
//! and `fsync`ed before ids are handed back; a torn trailing line left by a
//! crash is discarded on open.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, Write};
use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAYLOAD_SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("payload schema error for {kind:?}: {reason}")]
    Schema { kind: EventKind, reason: String },
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    UserMessage,
    SystemMessage,
    ToolEvent,
    StateTransition,
    Feedback,
    DiagnosisAnswer,
    TurnFailed,
    AuthEvent,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::UserMessage,
        EventKind::SystemMessage,
        EventKind::ToolEvent,
        EventKind::StateTransition,
        EventKind::Feedback,
        EventKind::DiagnosisAnswer,
        EventKind::TurnFailed,
        EventKind::AuthEvent,
    ];

    fn required_fields(self) -> &'static [&'static str] {
        match self {
            EventKind::UserMessage | EventKind::SystemMessage => &["text"],
            EventKind::ToolEvent => &["tool_id"],
            EventKind::StateTransition => &["transition"],
            EventKind::Feedback => &["target_event_id", "vote"],
            EventKind::DiagnosisAnswer => &["attempt_id", "question_id", "option_id", "selected"],
            EventKind::TurnFailed => &["reason"],
            EventKind::AuthEvent => &["action"],
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s.trim()))
    }
}

/// System component a record is attributed to (used for feedback tallies).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Filter,
    Judger,
    Responder,
    Facilitator,
    Tools,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Filter,
        Component::Judger,
        Component::Responder,
        Component::Facilitator,
        Component::Tools,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: u64,
    #[serde(with = "iso_millis")]
    pub ts: i64,
    pub user_id: String,
    pub session_id: Option<String>,
    pub kind: EventKind,
    pub component: Option<Component>,
    pub payload: Value,
}

impl EventRecord {
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.payload.get(name)
    }

    pub fn str_field(&self, name: &str) -> Option<&str> {
        self.payload.get(name).and_then(Value::as_str)
    }

    /// Deserializes the payload into a typed view; unknown fields are ignored.
    pub fn payload_as<T: serde::de::DeserializeOwned>(&self) -> Option<T> {
        serde_json::from_value(self.payload.clone()).ok()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// An event before the store has assigned its id and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub user_id: String,
    pub session_id: Option<String>,
    pub kind: EventKind,
    pub component: Option<Component>,
    pub payload: Value,
}

impl NewEvent {
    pub fn new(kind: EventKind, user_id: impl Into<String>, payload: Value) -> Self {
        NewEvent { user_id: user_id.into(), session_id: None, kind, component: None, payload }
    }

    pub fn session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = Some(session_id.into());
        self
    }

    pub fn component(mut self, component: Component) -> Self {
        self.component = Some(component);
        self
    }

    fn checked(mut self) -> Result<Self, EventError> {
        let kind = self.kind;
        let schema = |reason: String| EventError::Schema { kind, reason };
        let obj = self
            .payload
            .as_object_mut()
            .ok_or_else(|| schema("payload must be an object".into()))?;
        for field in kind.required_fields() {
            match obj.get(*field) {
                None | Some(Value::Null) => return Err(schema(format!("missing field {field}"))),
                _ => {}
            }
        }
        if kind == EventKind::SystemMessage && self.component.is_none() {
            return Err(schema("system messages must carry a component".into()));
        }
        if self.user_id.is_empty() {
            return Err(schema("empty user_id".into()));
        }
        obj.entry("v").or_insert(Value::from(PAYLOAD_SCHEMA_VERSION));
        Ok(self)
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        Utc::now().timestamp_millis()
    }
}

/// Deterministic clock for tests and replays: starts at `start` and moves
/// forward by `step` on every read.
#[derive(Debug)]
pub struct ManualClock {
    now: AtomicI64,
    step: i64,
}

impl ManualClock {
    pub fn new(start: i64, step: i64) -> Self {
        ManualClock { now: AtomicI64::new(start), step }
    }

    pub fn set(&self, ms: i64) {
        self.now.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.now.fetch_add(self.step, Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventFilter {
    pub user_id: Option<String>,
    pub kinds: Option<Vec<EventKind>>,
    /// Inclusive lower bound, ms.
    pub since: Option<i64>,
    /// Exclusive upper bound, ms.
    pub until: Option<i64>,
}

impl EventFilter {
    pub fn matches(&self, e: &EventRecord) -> bool {
        self.user_id.as_ref().is_none_or(|u| *u == e.user_id)
            && self.kinds.as_ref().is_none_or(|k| k.contains(&e.kind))
            && self.since.is_none_or(|s| e.ts >= s)
            && self.until.is_none_or(|u| e.ts < u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEntry {
    pub event_id: u64,
    pub speaker: Speaker,
    pub component: Option<Component>,
    pub text: String,
}

impl DialogueEntry {
    /// The conversation as the learner sees it: their messages plus the
    /// responder and facilitator bubbles.
    fn from_record(e: &EventRecord) -> Option<DialogueEntry> {
        let speaker = match (e.kind, e.component) {
            (EventKind::UserMessage, _) => Speaker::User,
            (EventKind::SystemMessage, Some(Component::Responder | Component::Facilitator)) => Speaker::System,
            _ => return None,
        };
        Some(DialogueEntry {
            event_id: e.event_id,
            speaker,
            component: e.component,
            text: e.str_field("text")?.to_string(),
        })
    }
}

struct Sequencer {
    next_id: u64,
    last_ts: i64,
    file: Option<File>,
}

pub struct EventStore {
    seq: Mutex<Sequencer>,
    log: RwLock<Vec<EventRecord>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for EventStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventStore").field("len", &self.len()).finish()
    }
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self::in_memory_with_clock(Arc::new(SystemClock))
    }

    pub fn in_memory_with_clock(clock: Arc<dyn Clock>) -> Self {
        EventStore {
            seq: Mutex::new(Sequencer { next_id: 1, last_ts: i64::MIN, file: None }),
            log: RwLock::new(Vec::new()),
            clock,
        }
    }

    /// Opens (or creates) a file-backed log, replaying existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EventError> {
        Self::open_with_clock(path, Arc::new(SystemClock))
    }

    pub fn open_with_clock(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, EventError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut records = Vec::new();
        let mut good_len: u64 = 0;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                if !line.ends_with('\n') {
                    // torn tail from an interrupted write
                    break;
                }
                let rec: EventRecord = serde_json::from_str(line.trim_end())
                    .map_err(|e| EventError::Corrupt { line: lineno, reason: e.to_string() })?;
                records.push(rec);
                good_len += n as u64;
            }
        }
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(io::SeekFrom::End(0))?;
        let store = Self::from_records_with_clock(records, clock)?;
        store.seq.lock().unwrap().file = Some(file);
        Ok(store)
    }

    /// Builds an in-memory store from previously exported records, keeping
    /// their ids and timestamps.
    pub fn from_records(records: Vec<EventRecord>) -> Result<Self, EventError> {
        Self::from_records_with_clock(records, Arc::new(SystemClock))
    }

    pub fn from_records_with_clock(records: Vec<EventRecord>, clock: Arc<dyn Clock>) -> Result<Self, EventError> {
        let mut last_id = 0;
        let mut last_ts = i64::MIN;
        for (i, r) in records.iter().enumerate() {
            if r.event_id <= last_id {
                return Err(EventError::Corrupt { line: i + 1, reason: "event ids not strictly increasing".into() });
            }
            last_id = r.event_id;
            last_ts = last_ts.max(r.ts);
        }
        Ok(EventStore {
            seq: Mutex::new(Sequencer { next_id: last_id + 1, last_ts, file: None }),
            log: RwLock::new(records),
            clock,
        })
    }

    /// Reads an export stream (one record per line).
    pub fn import(reader: impl BufRead) -> Result<Self, EventError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| EventError::Corrupt { line: i + 1, reason: e.to_string() })?,
            );
        }
        Self::from_records(records)
    }

    /// Server-clock time, never earlier than the last assigned timestamp.
    pub fn now_ms(&self) -> i64 {
        let seq = self.seq.lock().unwrap();
        self.clock.now_ms().max(seq.last_ts)
    }

    pub fn append(&self, event: NewEvent) -> Result<u64, EventError> {
        Ok(self.append_batch(vec![event])?[0])
    }

    /// Appends all events contiguously or none of them.
    pub fn append_batch(&self, events: Vec<NewEvent>) -> Result<Vec<u64>, EventError> {
        let events = events.into_iter().map(NewEvent::checked).collect::<Result<Vec<_>, _>>()?;
        let mut seq = self.seq.lock().unwrap();
        let ts = self.clock.now_ms().max(seq.last_ts);
        let mut next_id = seq.next_id;
        let mut records = Vec::with_capacity(events.len());
        for e in events {
            records.push(EventRecord {
                event_id: next_id,
                ts,
                user_id: e.user_id,
                session_id: e.session_id,
                kind: e.kind,
                component: e.component,
                payload: e.payload,
            });
            next_id += 1;
        }
        if let Some(file) = seq.file.as_mut() {
            let mut buf = String::new();
            for r in &records {
                buf.push_str(&r.to_line());
                buf.push('\n');
            }
            let before = file.metadata()?.len();
            let written = file.write_all(buf.as_bytes()).and_then(|_| file.sync_data());
            if let Err(e) = written {
                let _ = file.set_len(before);
                return Err(EventError::Storage(e));
            }
        }
        seq.next_id = next_id;
        seq.last_ts = ts;
        let ids = records.iter().map(|r| r.event_id).collect();
        self.log.write().unwrap().extend(records);
        Ok(ids)
    }

    pub fn len(&self) -> usize {
        self.log.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` over a consistent snapshot of the log.
    pub fn read<R>(&self, f: impl FnOnce(&[EventRecord]) -> R) -> R {
        f(&self.log.read().unwrap())
    }

    pub fn get(&self, event_id: u64) -> Option<EventRecord> {
        self.read(|log| {
            log.binary_search_by_key(&event_id, |e| e.event_id)
                .ok()
                .map(|i| log[i].clone())
        })
    }

    /// Last `k` dialogue entries of a session, oldest first.
    pub fn recent_dialogue(&self, session_id: &str, k: usize) -> Vec<DialogueEntry> {
        let mut out: Vec<DialogueEntry> = self.read(|log| {
            log.iter()
                .rev()
                .filter(|e| e.session_id.as_deref() == Some(session_id))
                .filter_map(DialogueEntry::from_record)
                .take(k)
                .collect()
        });
        out.reverse();
        out
    }

    /// Every recorded answer or revision for a diagnosis question, in time order.
    pub fn attempt_history(&self, user_id: &str, question_id: &str) -> Vec<EventRecord> {
        self.read(|log| {
            log.iter()
                .filter(|e| {
                    e.kind == EventKind::DiagnosisAnswer
                        && e.user_id == user_id
                        && e.str_field("question_id") == Some(question_id)
                })
                .cloned()
                .collect()
        })
    }

    pub fn export(&self, filter: &EventFilter) -> Vec<EventRecord> {
        self.read(|log| log.iter().filter(|e| filter.matches(e)).cloned().collect())
    }

    /// Writes matching records as newline-delimited JSON, ordered by event id.
    pub fn write_export(&self, out: &mut impl Write, filter: &EventFilter, pseudonymize: bool) -> io::Result<usize> {
        let records = self.export(filter);
        for r in &records {
            if pseudonymize {
                writeln!(out, "{}", pseudonymized(r).to_line())?;
            } else {
                writeln!(out, "{}", r.to_line())?;
            }
        }
        Ok(records.len())
    }
}

/// Replaces the user id everywhere it names the user: the envelope, the
/// session id and `user::...` ids inside the payload.
fn pseudonymized(r: &EventRecord) -> EventRecord {
    let alias = pseudonym(&r.user_id);
    let prefix = format!("{}::", r.user_id);
    let swap = |s: &str| s.strip_prefix(&prefix).map(|rest| format!("{alias}::{rest}"));
    fn walk(v: &mut Value, swap: &dyn Fn(&str) -> Option<String>) {
        match v {
            Value::String(s) => {
                if let Some(n) = swap(s) {
                    *s = n;
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|x| walk(x, swap)),
            Value::Object(map) => map.values_mut().for_each(|x| walk(x, swap)),
            _ => {}
        }
    }
    let mut out = r.clone();
    out.session_id = r.session_id.as_deref().map(|s| swap(s).unwrap_or_else(|| s.to_string()));
    walk(&mut out.payload, &swap);
    out.user_id = alias;
    out
}

pub fn pseudonym(user_id: &str) -> String {
    let digest = Sha256::digest(user_id.as_bytes());
    format!("anon-{}", &hex::encode(digest)[..16])
}

pub fn format_ts(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_ts(s: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|d| d.timestamp_millis())
}

mod iso_millis {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &i64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_ts(*ms))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_ts(&raw).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {raw}")))
    }
}

/// Convenience for building payload objects.
pub fn payload(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Value {
    Value::Object(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<Map<_, _>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn msg(user: &str, session: &str, text: &str) -> NewEvent {
        NewEvent::new(EventKind::UserMessage, user, json!({ "text": text })).session(session)
    }

    fn sys(session: &str, component: Component, text: &str) -> NewEvent {
        NewEvent::new(EventKind::SystemMessage, "u", json!({ "text": text }))
            .session(session)
            .component(component)
    }

    #[test]
    fn ids_increase() {
        let store = EventStore::in_memory();
        let a = store.append(msg("u", "s", "hi")).unwrap();
        let b = store.append(sys("s", Component::Responder, "hello")).unwrap();
        assert!(b > a);
        assert_eq!(b, a + 1);
    }

    #[test]
    fn missing_field_is_schema_error_and_not_persisted() {
        let store = EventStore::in_memory();
        let bad = NewEvent::new(EventKind::Feedback, "u", json!({ "vote": "up" }));
        assert!(matches!(store.append(bad), Err(EventError::Schema { .. })));
        let no_component = NewEvent::new(EventKind::SystemMessage, "u", json!({ "text": "x" }));
        assert!(matches!(store.append(no_component), Err(EventError::Schema { .. })));
        // a bad event poisons its whole batch
        let batch = vec![msg("u", "s", "ok"), NewEvent::new(EventKind::TurnFailed, "u", json!({}))];
        assert!(store.append_batch(batch).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn thousand_appends_replay_in_order() {
        let store = EventStore::in_memory();
        let ids: Vec<u64> = (0..1000).map(|i| store.append(msg("u", "s", &i.to_string())).unwrap()).collect();
        let distinct: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(distinct.len(), 1000);
        let texts: Vec<String> = store
            .export(&EventFilter::default())
            .iter()
            .map(|e| e.str_field("text").unwrap().to_string())
            .collect();
        assert_eq!(texts, (0..1000).map(|i| i.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn recent_dialogue_window() {
        let store = EventStore::in_memory();
        for t in 0..3 {
            store.append(msg("u", "s", &format!("q{t}"))).unwrap();
            store.append(sys("s", Component::Filter, "intent")).unwrap();
            store.append(sys("s", Component::Responder, &format!("a{t}"))).unwrap();
        }
        let last2: Vec<_> = store.recent_dialogue("s", 2).into_iter().map(|d| d.text).collect();
        assert_eq!(last2, vec!["q2", "a2"]);
        assert_eq!(store.recent_dialogue("s", 100).len(), 6);
        assert!(store.recent_dialogue("nope", 5).is_empty());
    }

    #[test]
    fn export_filters() {
        let clock = Arc::new(ManualClock::new(1_000, 10));
        let store = EventStore::in_memory_with_clock(clock);
        store.append(msg("a", "s", "x")).unwrap();
        store
            .append(NewEvent::new(EventKind::Feedback, "b", json!({ "target_event_id": 1, "vote": "up" })))
            .unwrap();
        let fb = store.export(&EventFilter { kinds: Some(vec![EventKind::Feedback]), ..Default::default() });
        assert_eq!(fb.len(), 1);
        assert_eq!(fb[0].user_id, "b");
        assert_eq!(store.export(&EventFilter::default()).len(), 2);
        let none = store.export(&EventFilter { since: Some(5_000), ..Default::default() });
        assert!(none.is_empty());
        let first = store.export(&EventFilter { until: Some(1_005), ..Default::default() });
        assert_eq!(first.len(), 1);
    }

    #[test]
    fn file_store_survives_reopen_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        {
            let store = EventStore::open(&path).unwrap();
            store.append(msg("u", "s", "one")).unwrap();
            store.append(msg("u", "s", "two")).unwrap();
        }
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(b"{\"event_id\":3,\"ts\":").unwrap();
        }
        let store = EventStore::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.append(msg("u", "s", "three")).unwrap(), 3);
        drop(store);
        let store = EventStore::open(&path).unwrap();
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn payload_version_is_stamped_and_unknown_fields_survive() {
        let store = EventStore::in_memory();
        store.append(msg("u", "s", "x")).unwrap();
        let e = store.get(1).unwrap();
        assert_eq!(e.field("v"), Some(&json!(1)));
        let mut line: Value = serde_json::from_str(&e.to_line()).unwrap();
        line["payload"]["future_field"] = json!(true);
        let back: EventRecord = serde_json::from_value(line).unwrap();
        assert_eq!(back.field("future_field"), Some(&json!(true)));
    }

    #[test]
    fn pseudonymized_export_hides_user() {
        let store = EventStore::in_memory();
        store.append(msg("alice", "s", "x")).unwrap();
        let mut out = Vec::new();
        store.write_export(&mut out, &EventFilter::default(), true).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(!text.contains("alice"));
        assert!(text.contains(&pseudonym("alice")));
    }

    #[test]
    fn timestamps_format_as_iso_utc() {
        assert_eq!(format_ts(0), "1970-01-01T00:00:00.000Z");
        assert_eq!(parse_ts("1970-01-01T00:00:01.500Z"), Some(1_500));
    }
}
