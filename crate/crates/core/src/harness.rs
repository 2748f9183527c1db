//! Offline improvement loop over collected failure cases: k-fold plans,
//! prompt rewriting (Rubric-Opt), in-context exemplars (Few-Shot), and
//! per-fold accuracy reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::content::{Expectation, ToolId};
use crate::events::{Component, EventRecord};
use crate::gateway::{GatewayError, LlmGateway, LlmRequest, RoleTag, TranscriptTurn};
use crate::pipeline::{
    Agents, Intent, IntentKind, PipelineConfig, ResponderInput, ToolResultPayload, UserMessage,
};
use crate::prompts::PromptSet;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least {k} cases, got {n}")]
    TooFewCases { n: usize, k: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("plan does not cover case {0}")]
    PlanMismatch(String),
    #[error("corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBundle {
    pub question: String,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
    #[serde(default)]
    pub transcript: Vec<TranscriptTurn>,
    pub user_message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_result: Option<ToolResultPayload>,
}

impl InputBundle {
    fn message(&self) -> UserMessage {
        UserMessage {
            session_id: "harness".into(),
            text: self.user_message.clone(),
            attached_tool_result: self.tool_result.clone(),
            client_timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExpectedLabel {
    Intent(IntentKind),
    Covered(BTreeSet<String>),
    Reference(String),
}

impl ExpectedLabel {
    fn parse(component: Component, v: &Value) -> Result<Self, String> {
        let r = match component {
            Component::Filter => serde_json::from_value(v.clone()).map(ExpectedLabel::Intent),
            Component::Judger => serde_json::from_value(v.clone()).map(ExpectedLabel::Covered),
            Component::Responder => serde_json::from_value(v.clone()).map(ExpectedLabel::Reference),
            other => return Err(format!("component {other:?} has no harness")),
        };
        r.map_err(|e| format!("expected_label does not fit {component:?}: {e}"))
    }

    fn render(&self) -> String {
        match self {
            ExpectedLabel::Intent(k) => format!("INTENT: {}", intent_token(*k)),
            ExpectedLabel::Covered(ids) if ids.is_empty() => "COVERED: none".into(),
            ExpectedLabel::Covered(ids) => format!("COVERED: {}", ids.iter().cloned().collect::<Vec<_>>().join(", ")),
            ExpectedLabel::Reference(t) => t.clone(),
        }
    }
}

fn intent_token(k: IntentKind) -> &'static str {
    match k {
        IntentKind::AnswerAttempt => "ANSWER",
        IntentKind::Question => "QUESTION",
        IntentKind::OffTopic => "OFFTOPIC",
        IntentKind::ProgressCommand => "PROGRESS",
        IntentKind::ToolResult => "TOOL_RESULT",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub case_id: String,
    pub component: Component,
    pub input_bundle: InputBundle,
    pub expected_label: ExpectedLabel,
    #[serde(default)]
    pub collected_from: Option<u64>,
}

fn role_of(c: Component) -> RoleTag {
    match c {
        Component::Filter => RoleTag::Filter,
        Component::Judger => RoleTag::Judge,
        _ => RoleTag::Responder,
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    #[serde(flatten)]
    envelope: EventRecord,
    expected_label: Value,
}

/// Reads a corpus: one exported event per line with an extra
/// `expected_label`; the payload carries `input_bundle` and optionally
/// `case_id`.
pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<FailureCase>, HarnessError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| HarnessError::Corpus { line: i + 1, reason };
        let raw: CorpusLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let e = raw.envelope;
        let component = e.component.ok_or_else(|| err("missing component".into()))?;
        let expected_label = ExpectedLabel::parse(component, &raw.expected_label).map_err(err)?;
        let bundle = e.field("input_bundle").ok_or_else(|| err("payload has no input_bundle".into()))?;
        let input_bundle: InputBundle = serde_json::from_value(bundle.clone()).map_err(|x| err(x.to_string()))?;
        let case_id = e.str_field("case_id").map(str::to_string).unwrap_or_else(|| format!("case-{:06}", e.event_id));
        if !seen.insert(case_id.clone()) {
            return Err(HarnessError::DuplicateCase(case_id));
        }
        out.push(FailureCase { case_id, component, input_bundle, expected_label, collected_from: Some(e.event_id) });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|c| c == case_id))
    }
}

/// Seeded shuffle, then round-robin into `k` folds.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, HarnessError> {
    if k < 2 {
        return Err(HarnessError::InvalidK(k));
    }
    if case_ids.len() < k {
        return Err(HarnessError::TooFewCases { n: case_ids.len(), k });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = case_ids.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(HarnessError::DuplicateCase(dup.clone()));
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { k, seed, folds })
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokens(a).into_iter().collect();
    let b: BTreeSet<String> = tokens(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Ranks `train` for `target`: same component first, then token overlap
/// with the target's message, then case id.
pub fn select_few_shot<'a>(train: &'a [FailureCase], target: &FailureCase, m: usize) -> Vec<&'a FailureCase> {
    let mut ranked: Vec<(&FailureCase, bool, f64)> = train
        .iter()
        .filter(|c| c.case_id != target.case_id)
        .map(|c| {
            (c, c.component == target.component, jaccard(&c.input_bundle.user_message, &target.input_bundle.user_message))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.0.case_id.cmp(&b.0.case_id))
    });
    ranked.into_iter().take(m).map(|r| r.0).collect()
}

fn describe(case: &FailureCase) -> String {
    let b = &case.input_bundle;
    let mut s = format!("Question: {}\n", b.question);
    if !b.expectations.is_empty() {
        let ids: Vec<&str> = b.expectations.iter().map(|e| e.id.as_str()).collect();
        s.push_str(&format!("Expectations: {}\n", ids.join(", ")));
    }
    s.push_str(&format!("Teacher: {}\n", b.user_message));
    if let Some(t) = &b.tool_result {
        s.push_str(&format!("Tool result ({}): {}\n", t.tool_id, t.data));
    }
    s.push_str(&format!("Expected: {}", case.expected_label.render()));
    s
}

/// One gateway call asking for a revised prompt. Falls back to `base_prompt`
/// if the call fails or the reply has no `REVISED:` section.
pub fn rubric_opt(
    base_prompt: &str,
    component: Component,
    train: &[FailureCase],
    gateway: &dyn LlmGateway,
    prompts: &PromptSet,
) -> Result<String, HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::EmptyTrainSet);
    }
    let failures = train.iter().map(describe).collect::<Vec<_>>().join("\n\n");
    let request = LlmRequest {
        role_tag: RoleTag::RubricOpt,
        system_prompt: prompts.render(
            RoleTag::RubricOpt,
            &[("component", &format!("{component:?}")), ("base_prompt", base_prompt), ("failures", &failures)],
        ),
        transcript: vec![TranscriptTurn::user("Revise the prompt.")],
        temperature: 0.0,
        seed: Some(0),
    };
    match gateway.complete(&request) {
        Ok(r) => Ok(parse_revised(&r.text).unwrap_or_else(|| {
            tracing::warn!("rubric_opt reply had no REVISED section");
            base_prompt.to_string()
        })),
        Err(e) => {
            tracing::warn!(error = %e, "rubric_opt call failed, keeping base prompt");
            Ok(base_prompt.to_string())
        }
    }
}

fn parse_revised(text: &str) -> Option<String> {
    let at = text.find("REVISED:")?;
    let revised = text[at + "REVISED:".len()..].trim();
    (!revised.is_empty()).then(|| revised.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    RubricOpt,
    FewShot,
    Both,
}

impl Method {
    fn rubric(self) -> bool {
        matches!(self, Method::RubricOpt | Method::Both)
    }

    fn few_shot(self) -> bool {
        matches!(self, Method::FewShot | Method::Both)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "baseline" => Ok(Method::Baseline),
            "rubric" | "rubricopt" => Ok(Method::RubricOpt),
            "fewshot" => Ok(Method::FewShot),
            "both" => Ok(Method::Both),
            _ => Err(format!("unknown method {s:?} (baseline|rubric|fewshot|both)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// In-context exemplars per case.
    pub m: usize,
    /// Token F1 needed for a responder reply to count as correct.
    pub f1_threshold: f64,
    pub pipeline: PipelineConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig { m: 4, f1_threshold: 0.6, pipeline: PipelineConfig::default() }
    }
}

/// Everything derived from the training folds for one held-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldConfig {
    pub method: Method,
    pub prompts: PromptSet,
    /// Training cases, sorted by case id.
    pub train: Vec<FailureCase>,
    pub m: usize,
}

impl FoldConfig {
    pub fn exemplars(&self, target: &FailureCase) -> Vec<&FailureCase> {
        if self.method.few_shot() {
            select_few_shot(&self.train, target, self.m)
        } else {
            vec![]
        }
    }

    /// Prompt set used for `target`, exemplars prepended when enabled.
    pub fn prompts_for(&self, target: &FailureCase) -> PromptSet {
        let exemplars = self.exemplars(target);
        if exemplars.is_empty() {
            return self.prompts.clone();
        }
        let role = role_of(target.component);
        let block = exemplars
            .iter()
            .enumerate()
            .map(|(i, c)| format!("Example {}:\n{}", i + 1, describe(c)))
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut set = self.prompts.clone();
        set.set(role, format!("Worked examples:\n\n{block}\n\n{}", self.prompts.get(role)));
        set
    }
}

/// Builds the configuration for `fold` from the other folds only.
pub fn fold_config(
    plan: &FoldPlan,
    corpus: &[FailureCase],
    fold: usize,
    method: Method,
    gateway: &dyn LlmGateway,
    base: &PromptSet,
    m: usize,
) -> Result<FoldConfig, HarnessError> {
    let held_out: HashSet<&str> = plan.folds[fold].iter().map(String::as_str).collect();
    let mut train: Vec<FailureCase> = corpus.iter().filter(|c| !held_out.contains(c.case_id.as_str())).cloned().collect();
    train.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut prompts = base.clone();
    if method.rubric() {
        if train.is_empty() {
            return Err(HarnessError::EmptyTrainSet);
        }
        for component in [Component::Filter, Component::Judger, Component::Responder] {
            let subset: Vec<FailureCase> = train.iter().filter(|c| c.component == component).cloned().collect();
            if subset.is_empty() {
                continue;
            }
            let role = role_of(component);
            let revised = rubric_opt(base.get(role), component, &subset, gateway, base)?;
            prompts.set(role, revised);
        }
    }
    Ok(FoldConfig { method, prompts, train, m })
}

/// Multiset token F1.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()).filter(|n| **n > 0) {
            *n -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Runs one case through its component and scores it.
pub fn run_case(
    case: &FailureCase,
    gateway: &dyn LlmGateway,
    prompts: &PromptSet,
    config: &HarnessConfig,
) -> Result<bool, GatewayError> {
    let agents = Agents::new(gateway, prompts, &config.pipeline);
    let b = &case.input_bundle;
    let msg = b.message();
    let candidates: Vec<&Expectation> = b.expectations.iter().collect();
    let mut calls = Vec::new();
    match (&case.expected_label, case.component) {
        (ExpectedLabel::Intent(want), Component::Filter) => {
            let got = agents.classify_intent(&msg, &b.question, &candidates, &b.transcript, &mut calls)?;
            Ok(got.kind == *want)
        }
        (ExpectedLabel::Covered(want), Component::Judger) => {
            let n = config.pipeline.n_judges;
            let got = agents.judge_candidates(&msg, &b.question, &candidates, &b.transcript, n, &mut calls)?;
            Ok(got.covered == *want)
        }
        (ExpectedLabel::Reference(want), Component::Responder) => {
            let intent = Intent { kind: IntentKind::AnswerAttempt, confidence_note: String::new() };
            let input = ResponderInput {
                question: &b.question,
                intent: &intent,
                missing: candidates,
                hints: &[],
                hint_index: 0,
                requestable_tools: vec![ToolId::Notebook],
                miss_tools: vec![],
                images: &[],
                msg: &msg,
                ctx: &b.transcript,
            };
            let out = agents.generate_response(&input, &mut calls);
            Ok(!out.fallback && token_f1(&out.text, want) >= config.f1_threshold)
        }
        _ => Err(GatewayError::BadResponse(format!("case {} label does not match its component", case.case_id))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    /// Indexed by fold; `None` for folds that hit a gateway error.
    pub per_fold_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: f64,
    pub failed_folds: Vec<usize>,
}

fn evaluate_fold(
    plan: &FoldPlan,
    corpus: &[FailureCase],
    fold: usize,
    method: Method,
    gateway: &dyn LlmGateway,
    base: &PromptSet,
    config: &HarnessConfig,
) -> Result<f64, String> {
    let fc = fold_config(plan, corpus, fold, method, gateway, base, config.m).map_err(|e| e.to_string())?;
    let by_id: BTreeMap<&str, &FailureCase> = corpus.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut correct = 0usize;
    for id in &plan.folds[fold] {
        let case = by_id[id.as_str()];
        if run_case(case, gateway, &fc.prompts_for(case), config).map_err(|e| e.to_string())? {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / plan.folds[fold].len() as f64)
}

/// Evaluates every fold (in parallel) and averages the folds that ran.
pub fn evaluate(
    plan: &FoldPlan,
    corpus: &[FailureCase],
    method: Method,
    gateway: &dyn LlmGateway,
    base: &PromptSet,
    config: &HarnessConfig,
) -> Result<MethodReport, HarnessError> {
    let ids: HashSet<&str> = corpus.iter().map(|c| c.case_id.as_str()).collect();
    if let Some(missing) = plan.folds.iter().flatten().find(|id| !ids.contains(id.as_str())) {
        return Err(HarnessError::PlanMismatch(missing.clone()));
    }
    let planned: usize = plan.folds.iter().map(Vec::len).sum();
    if planned != corpus.len() {
        let extra = corpus.iter().find(|c| plan.fold_of(&c.case_id).is_none()).map(|c| c.case_id.clone());
        return Err(HarnessError::PlanMismatch(extra.unwrap_or_default()));
    }
    let results: Vec<Result<f64, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..plan.folds.len())
            .map(|f| s.spawn(move || evaluate_fold(plan, corpus, f, method, gateway, base, config)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    });
    let mut per_fold = Vec::new();
    let mut failed = Vec::new();
    for (f, r) in results.into_iter().enumerate() {
        match r {
            Ok(acc) => per_fold.push(Some(acc)),
            Err(e) => {
                tracing::warn!(fold = f, error = %e, "fold failed");
                per_fold.push(None);
                failed.push(f);
            }
        }
    }
    let ok: Vec<f64> = per_fold.iter().flatten().copied().collect();
    let mean = if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    Ok(MethodReport { method, k: plan.k, seed: plan.seed, per_fold_accuracy: per_fold, mean_accuracy: mean, failed_folds: failed })
}
