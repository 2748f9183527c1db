//! Curriculum data model and content-pack loading.
//!
//! A content pack is a directory holding `manifest.json` and an `assets/`
//! folder. The manifest describes the CK/PCK → module → activity hierarchy;
//! each activity is split into stages, each stage into expectations (the
//! knowledge points a learner's answers are judged against). Every module
//! ends with a multiple-choice diagnosis.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ASSET_DIR: &str = "assets";

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("cannot read content pack: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("content pack failed validation:\n{}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("activity {activity_id} references missing asset {asset}")]
    MissingAsset { activity_id: String, asset: String },
    #[error("{0} not found")]
    NotFound(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KnowledgeDomain {
    CK,
    PCK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    Notebook,
    TwoLine,
    FillTable,
}

impl ToolId {
    pub fn as_str(self) -> &'static str {
        match self {
            ToolId::Notebook => "notebook",
            ToolId::TwoLine => "two_line",
            ToolId::FillTable => "fill_table",
        }
    }

    pub fn parse(s: &str) -> Option<ToolId> {
        match s.trim().to_ascii_lowercase().as_str() {
            "notebook" => Some(ToolId::Notebook),
            "two_line" => Some(ToolId::TwoLine),
            "fill_table" => Some(ToolId::FillTable),
            _ => None,
        }
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolTrigger {
    AutoOnEnter,
    OnDemand,
    OnJudgeMiss,
}

impl ToolTrigger {
    pub fn as_str(self) -> &'static str {
        match self {
            ToolTrigger::AutoOnEnter => "auto_on_enter",
            ToolTrigger::OnDemand => "on_demand",
            ToolTrigger::OnJudgeMiss => "on_judge_miss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolBinding {
    pub tool_id: ToolId,
    pub trigger: ToolTrigger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub id: String,
    pub statement: String,
    pub rubric: String,
    #[serde(default)]
    pub exemplar_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub expectations: Vec<Expectation>,
    #[serde(default)]
    pub hint_templates: Vec<String>,
    #[serde(default)]
    pub tool_bindings: Vec<ToolBinding>,
}

impl Stage {
    pub fn expectation_ids(&self) -> impl Iterator<Item = &str> {
        self.expectations.iter().map(|e| e.id.as_str())
    }

    pub fn binds(&self, tool: ToolId) -> bool {
        self.tool_bindings.iter().any(|b| b.tool_id == tool)
    }
}

/// A learning activity. `question_text` and `summary_template` use the
/// restricted rich-text subset (paragraphs, `*emphasis*`, `$tex$` inline
/// math) and are passed through to clients untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub id: String,
    pub title: String,
    pub question_text: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
    pub stages: Vec<Stage>,
    pub summary_template: String,
}

impl Activity {
    pub fn expectations(&self) -> impl Iterator<Item = &Expectation> {
        self.stages.iter().flat_map(|s| s.expectations.iter())
    }

    pub fn expectation(&self, id: &str) -> Option<&Expectation> {
        self.expectations().find(|e| e.id == id)
    }

    pub fn last_stage_index(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisOption {
    pub option_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisQuestion {
    pub id: String,
    pub prompt: String,
    pub options: Vec<DiagnosisOption>,
    pub multi_select: bool,
    pub correct_option_ids: Vec<String>,
}

impl DiagnosisQuestion {
    pub fn has_option(&self, option_id: &str) -> bool {
        self.options.iter().any(|o| o.option_id == option_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub id: String,
    pub questions: Vec<DiagnosisQuestion>,
}

impl Diagnosis {
    pub fn question(&self, id: &str) -> Option<&DiagnosisQuestion> {
        self.questions.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Module {
    pub id: String,
    pub domain: KnowledgeDomain,
    pub title: String,
    pub activities: Vec<Activity>,
    pub diagnosis: Diagnosis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentPack {
    pub schema_version: String,
    pub modules: Vec<Module>,
}

impl ContentPack {
    pub fn activities(&self) -> impl Iterator<Item = &Activity> {
        self.modules.iter().flat_map(|m| m.activities.iter())
    }

    /// Learning activities only; diagnoses live in their own namespace.
    pub fn get_activity(&self, activity_id: &str) -> Result<&Activity, ContentError> {
        self.activities()
            .find(|a| a.id == activity_id)
            .ok_or_else(|| ContentError::NotFound(format!("activity {activity_id}")))
    }

    pub fn get_diagnosis(&self, diagnosis_id: &str) -> Result<&Diagnosis, ContentError> {
        self.modules
            .iter()
            .map(|m| &m.diagnosis)
            .find(|d| d.id == diagnosis_id)
            .ok_or_else(|| ContentError::NotFound(format!("diagnosis {diagnosis_id}")))
    }

    pub fn module_of_activity(&self, activity_id: &str) -> Option<&Module> {
        self.modules
            .iter()
            .find(|m| m.activities.iter().any(|a| a.id == activity_id))
    }

    pub fn module_of_diagnosis(&self, diagnosis_id: &str) -> Option<&Module> {
        self.modules.iter().find(|m| m.diagnosis.id == diagnosis_id)
    }

    pub fn to_manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("content pack serializes")
    }
}

/// One broken invariant, located by the id of the offending item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub id: String,
    pub message: String,
}

impl Violation {
    fn new(id: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { id: id.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.id, self.message)
    }
}

/// Checks every structural invariant and returns all violations in
/// document order. An empty list means the pack is valid.
pub fn validate_content_pack(pack: &ContentPack) -> Vec<Violation> {
    let mut out = Vec::new();
    if pack.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            "schema_version",
            format!("unsupported schema version {:?} (expected {SCHEMA_VERSION:?})", pack.schema_version),
        ));
    }

    let mut module_ids = HashSet::new();
    let mut activity_ids = HashSet::new();
    let mut diagnosis_ids = HashSet::new();

    for module in &pack.modules {
        if module.id.trim().is_empty() {
            out.push(Violation::new("<module>", "module id is empty"));
        } else if !module_ids.insert(module.id.as_str()) {
            out.push(Violation::new(&module.id, "duplicate module id"));
        }
        if module.activities.is_empty() {
            out.push(Violation::new(&module.id, "module has no learning activities"));
        }
        for activity in &module.activities {
            if activity.id.trim().is_empty() {
                out.push(Violation::new(&module.id, "activity with empty id"));
            } else if !activity_ids.insert(activity.id.as_str()) {
                out.push(Violation::new(&activity.id, "duplicate activity id"));
            }
            validate_activity(activity, &mut out);
        }

        let diagnosis = &module.diagnosis;
        if diagnosis.id.trim().is_empty() {
            out.push(Violation::new(&module.id, "diagnosis id is empty"));
        } else if !diagnosis_ids.insert(diagnosis.id.as_str()) {
            out.push(Violation::new(&diagnosis.id, "duplicate diagnosis id"));
        }
        let mut question_ids = HashSet::new();
        for q in &diagnosis.questions {
            if !question_ids.insert(q.id.as_str()) {
                out.push(Violation::new(&q.id, "duplicate question id in diagnosis"));
            }
            validate_question(q, &mut out);
        }
    }
    out
}

fn validate_activity(activity: &Activity, out: &mut Vec<Violation>) {
    if activity.stages.is_empty() {
        out.push(Violation::new(&activity.id, "activity has no stages"));
    }
    let mut expectation_ids = HashSet::new();
    for stage in &activity.stages {
        if stage.expectations.is_empty() {
            out.push(Violation::new(
                format!("{}/{}", activity.id, stage.id),
                "stage has no expectations",
            ));
        }
        for e in &stage.expectations {
            if e.id.trim().is_empty() {
                out.push(Violation::new(&activity.id, "expectation with empty id"));
            } else if !expectation_ids.insert(e.id.as_str()) {
                out.push(Violation::new(
                    format!("{}/{}", activity.id, e.id),
                    "duplicate expectation id within activity",
                ));
            }
            if e.statement.trim().is_empty() {
                out.push(Violation::new(format!("{}/{}", activity.id, e.id), "empty statement"));
            }
            if e.rubric.trim().is_empty() {
                out.push(Violation::new(format!("{}/{}", activity.id, e.id), "empty rubric"));
            }
        }
    }
}

fn validate_question(q: &DiagnosisQuestion, out: &mut Vec<Violation>) {
    if q.options.len() < 2 {
        out.push(Violation::new(&q.id, "question needs at least 2 options"));
    }
    let mut seen = HashSet::new();
    for o in &q.options {
        if !seen.insert(o.option_id.as_str()) {
            out.push(Violation::new(&q.id, format!("duplicate option id {}", o.option_id)));
        }
    }
    for c in &q.correct_option_ids {
        if !q.has_option(c) {
            out.push(Violation::new(&q.id, format!("correct option {c} is not an option")));
        }
    }
    let distinct: HashSet<_> = q.correct_option_ids.iter().collect();
    if distinct.len() != q.correct_option_ids.len() {
        out.push(Violation::new(&q.id, "correct_option_ids contains duplicates"));
    }
    if !q.multi_select && distinct.len() != 1 {
        out.push(Violation::new(
            &q.id,
            format!("single-select question must have exactly 1 correct option, has {}", distinct.len()),
        ));
    }
}

/// Parses a manifest without touching the filesystem. Validation still runs.
pub fn parse_manifest(json: &str) -> Result<ContentPack, ContentError> {
    let pack: ContentPack = serde_json::from_str(json)?;
    let violations = validate_content_pack(&pack);
    if !violations.is_empty() {
        return Err(ContentError::Validation(violations));
    }
    Ok(pack)
}

pub fn load_content_pack(dir: impl AsRef<Path>) -> Result<ContentPack, ContentError> {
    let dir = dir.as_ref();
    let raw = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let pack = parse_manifest(&raw)?;
    let assets = dir.join(ASSET_DIR);
    for activity in pack.activities() {
        for r in &activity.image_refs {
            if !resolve_asset(&assets, r).is_some_and(|p| p.is_file()) {
                return Err(ContentError::MissingAsset {
                    activity_id: activity.id.clone(),
                    asset: r.clone(),
                });
            }
        }
    }
    Ok(pack)
}

/// Resolves an asset reference inside `asset_dir`, refusing anything that
/// would escape it.
pub fn resolve_asset(asset_dir: &Path, reference: &str) -> Option<PathBuf> {
    let rel = Path::new(reference);
    let clean = rel
        .components()
        .all(|c| matches!(c, std::path::Component::Normal(_)));
    if !clean || reference.is_empty() {
        return None;
    }
    Some(asset_dir.join(rel))
}

pub fn write_content_pack(pack: &ContentPack, dir: impl AsRef<Path>) -> Result<(), ContentError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(ASSET_DIR))?;
    fs::write(dir.join(MANIFEST_FILE), pack.to_manifest_json())?;
    Ok(())
}

/// Builders for small packs, shared by tests and demos.
pub mod fixtures {
    use super::*;

    pub fn expectation(id: &str) -> Expectation {
        Expectation {
            id: id.into(),
            statement: format!("statement {id}"),
            rubric: format!("rubric {id}"),
            exemplar_answers: vec![],
        }
    }

    pub fn stage(id: &str, exps: &[&str]) -> Stage {
        Stage {
            id: id.into(),
            expectations: exps.iter().map(|e| expectation(e)).collect(),
            hint_templates: vec![format!("hint for {id}")],
            tool_bindings: vec![],
        }
    }

    pub fn activity(id: &str, stages: Vec<Stage>) -> Activity {
        Activity {
            id: id.into(),
            title: format!("Title {id}"),
            question_text: format!("Question for {id}"),
            image_refs: vec![],
            stages,
            summary_template: "Summary of {title}".into(),
        }
    }

    pub fn question(id: &str, multi: bool, correct: &[&str]) -> DiagnosisQuestion {
        DiagnosisQuestion {
            id: id.into(),
            prompt: format!("prompt {id}"),
            options: ["A", "B", "C"]
                .iter()
                .map(|o| DiagnosisOption { option_id: (*o).into(), text: format!("option {o}") })
                .collect(),
            multi_select: multi,
            correct_option_ids: correct.iter().map(|s| (*s).into()).collect(),
        }
    }

    pub fn module(id: &str, n_activities: usize) -> Module {
        Module {
            id: id.into(),
            domain: KnowledgeDomain::CK,
            title: format!("Module {id}"),
            activities: (1..=n_activities)
                .map(|i| activity(&format!("{id}-{i}"), vec![stage("s1", &["e1", "e2"]), stage("s2", &["e3"])]))
                .collect(),
            diagnosis: Diagnosis {
                id: format!("{id}-D"),
                questions: vec![question("q1", false, &["A"]), question("q2", true, &["A", "C"])],
            },
        }
    }

    pub fn pack(modules: Vec<Module>) -> ContentPack {
        ContentPack { schema_version: SCHEMA_VERSION.into(), modules }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn valid_pack_has_no_violations() {
        let p = pack(vec![module("CKSM1", 2), module("CKSM2", 2)]);
        assert_eq!(validate_content_pack(&p), vec![]);
        assert_eq!(p.activities().count(), 4);
    }

    #[test]
    fn duplicate_activity_id_across_modules() {
        let mut a = module("CKSM1", 1);
        let mut b = module("CKSM2", 1);
        a.activities[0].id = "CKSM1-1".into();
        b.activities[0].id = "CKSM1-1".into();
        let v = validate_content_pack(&pack(vec![a, b]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].id, "CKSM1-1");
    }

    #[test]
    fn empty_module_is_one_violation() {
        let v = validate_content_pack(&pack(vec![module("M0", 0)]));
        assert_eq!(v, vec![Violation::new("M0", "module has no learning activities")]);
    }

    #[test]
    fn single_select_with_two_correct_options() {
        let mut m = module("M", 1);
        m.diagnosis.questions[0].correct_option_ids = vec!["A".into(), "B".into()];
        let v = validate_content_pack(&pack(vec![m]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].id, "q1");
    }

    #[test]
    fn violations_are_collected_in_document_order() {
        let mut m = module("M", 2);
        m.activities[0].stages[0].expectations[0].rubric = " ".into();
        m.activities[1].stages.clear();
        m.diagnosis.questions[1].options.truncate(1);
        let v = validate_content_pack(&pack(vec![m]));
        let ids: Vec<_> = v.iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["M-1/e1", "M-2", "q2", "q2"]);
    }

    #[test]
    fn diagnosis_is_not_an_activity() {
        let p = pack(vec![module("M", 1)]);
        assert!(matches!(p.get_activity("M-D"), Err(ContentError::NotFound(_))));
        assert!(matches!(p.get_activity("ZZZ"), Err(ContentError::NotFound(_))));
        assert_eq!(p.get_diagnosis("M-D").unwrap().questions.len(), 2);
        assert_eq!(p.get_activity("M-1").unwrap().title, "Title M-1");
    }

    #[test]
    fn full_scale_pack_validates() {
        // 8 modules carrying 51 learning activities between them.
        let modules: Vec<_> = (0..8).map(|i| module(&format!("M{i}"), if i < 3 { 7 } else { 6 })).collect();
        let p = pack(modules);
        assert_eq!(p.activities().count(), 51);
        assert!(validate_content_pack(&p).is_empty());
    }

    #[test]
    fn asset_refs_cannot_escape() {
        let base = Path::new("/pack/assets");
        assert!(resolve_asset(base, "../secret").is_none());
        assert!(resolve_asset(base, "/etc/passwd").is_none());
        assert_eq!(resolve_asset(base, "img/a.png").unwrap(), base.join("img/a.png"));
    }

    #[test]
    fn load_reports_missing_asset() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pack(vec![module("M", 1)]);
        p.modules[0].activities[0].image_refs = vec!["graph.png".into()];
        write_content_pack(&p, dir.path()).unwrap();
        match load_content_pack(dir.path()) {
            Err(ContentError::MissingAsset { asset, .. }) => assert_eq!(asset, "graph.png"),
            other => panic!("expected MissingAsset, got {other:?}"),
        }
        fs::write(dir.path().join("assets/graph.png"), b"png").unwrap();
        assert_eq!(load_content_pack(dir.path()).unwrap(), p);
    }

    #[test]
    fn malformed_manifest_is_a_parse_error() {
        assert!(matches!(parse_manifest("{\"schema_version\": 1"), Err(ContentError::Parse(_))));
    }
}
