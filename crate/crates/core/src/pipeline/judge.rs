use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

use super::{
    render_expectations, render_transcript, transcript_with, AggregatedVerdict, AggregationRule, Agents, GatewayCall,
    JudgeVerdict, UserMessage,
};
use crate::content::{Activity, Expectation, Stage};
use crate::gateway::{GatewayError, LlmRequest, RoleTag, TranscriptTurn};

static COVERED_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?im)^\s*covered\s*:(.*)$").unwrap());
static EVIDENCE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?im)^\s*evidence\s+([^:\s]+)\s*:\s*"?(.*?)"?\s*$"#).unwrap());

const REPAIR: &str =
    "Your reply did not end with a COVERED line. Reply with exactly one line: COVERED: <comma-separated ids> or COVERED: none";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedJudgeOutput {
    pub ids: Vec<String>,
    pub evidence: BTreeMap<String, String>,
}

/// Reads the last `COVERED:` line (case-insensitive) and any
/// `EVIDENCE <id>: "..."` lines. Returns `None` when no covered line exists.
pub fn parse_judge_output(text: &str) -> Option<ParsedJudgeOutput> {
    let list = COVERED_LINE.captures_iter(text).last()?.get(1)?.as_str().trim().to_string();
    let ids = if list.eq_ignore_ascii_case("none") {
        vec![]
    } else {
        list.split(',')
            .map(|s| s.trim().trim_matches(|c| c == '`' || c == '"' || c == '.').to_string())
            .filter(|s| !s.is_empty())
            .collect()
    };
    let evidence = EVIDENCE_LINE
        .captures_iter(text)
        .map(|c| (c[1].to_string(), c[2].to_string()))
        .collect();
    Some(ParsedJudgeOutput { ids, evidence })
}

/// Combines judge verdicts. Union keeps anything any judge saw; majority
/// keeps ids reported by more than half of the judges.
pub fn aggregate(per_judge: Vec<JudgeVerdict>, rule: AggregationRule) -> AggregatedVerdict {
    let covered = match rule {
        AggregationRule::Union => per_judge.iter().flat_map(|j| j.covered.iter().cloned()).collect(),
        AggregationRule::Majority => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for j in &per_judge {
                for id in &j.covered {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let n = per_judge.len();
            counts.into_iter().filter(|(_, c)| 2 * c > n).map(|(id, _)| id.to_string()).collect()
        }
    };
    AggregatedVerdict { covered, per_judge, rule }
}

struct JudgeCall<'a> {
    question: &'a str,
    candidates: &'a [&'a Expectation],
    ctx: &'a [TranscriptTurn],
    msg: &'a UserMessage,
}

impl Agents<'_> {
    /// Judges the message against every expectation of `stage`.
    pub fn judge_expectations(
        &self,
        msg: &UserMessage,
        activity: &Activity,
        stage: &Stage,
        ctx: &[TranscriptTurn],
        n_judges: usize,
        calls: &mut Vec<GatewayCall>,
    ) -> Result<AggregatedVerdict, GatewayError> {
        let candidates: Vec<&Expectation> = stage.expectations.iter().collect();
        self.judge_candidates(msg, &activity.question_text, &candidates, ctx, n_judges, calls)
    }

    /// Issues exactly `n_judges` judge calls (plus at most one repair each)
    /// and aggregates them. Reported ids outside `candidates` are dropped.
    pub fn judge_candidates(
        &self,
        msg: &UserMessage,
        question: &str,
        candidates: &[&Expectation],
        ctx: &[TranscriptTurn],
        n_judges: usize,
        calls: &mut Vec<GatewayCall>,
    ) -> Result<AggregatedVerdict, GatewayError> {
        let n_judges = n_judges.max(1);
        let job = JudgeCall { question, candidates, ctx, msg };
        let results: Vec<(Result<JudgeVerdict, GatewayError>, Vec<GatewayCall>)> = if n_judges == 1 {
            let mut c = Vec::new();
            vec![(self.run_judge(&job, 0, &mut c), c)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..n_judges)
                    .map(|j| {
                        let job = &job;
                        scope.spawn(move || {
                            let mut c = Vec::new();
                            (self.run_judge(job, j, &mut c), c)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("judge thread panicked")).collect()
            })
        };
        let mut per_judge = Vec::with_capacity(n_judges);
        let mut first_err = None;
        for (r, c) in results {
            calls.extend(c);
            match r {
                Ok(v) => per_judge.push(v),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(aggregate(per_judge, self.config.rule))
    }

    fn run_judge(&self, job: &JudgeCall<'_>, index: usize, calls: &mut Vec<GatewayCall>) -> Result<JudgeVerdict, GatewayError> {
        let display_index = (index + 1).to_string();
        let system_prompt = self.prompts.render(
            RoleTag::Judge,
            &[
                ("judge_index", &display_index),
                ("question", job.question),
                ("expectations", &render_expectations(job.candidates)),
                ("transcript", &render_transcript(job.ctx)),
                ("message", &job.msg.text),
                ("tool_result", &job.msg.tool_result_block()),
            ],
        );
        let mut request = LlmRequest {
            role_tag: RoleTag::Judge,
            system_prompt,
            transcript: transcript_with(job.ctx, job.msg),
            temperature: self.config.judge_temperature,
            seed: self.config.seed.map(|s| s + index as i64),
        };
        let first = self.call(&request, calls)?;
        let parsed = match parse_judge_output(&first.text) {
            Some(p) => Some(p),
            None => {
                request.transcript.push(TranscriptTurn::system(first.text));
                request.transcript.push(TranscriptTurn::user(REPAIR));
                parse_judge_output(&self.call(&request, calls)?.text)
            }
        };
        let Some(parsed) = parsed else {
            tracing::warn!(judge = index, "judge output unparsable after repair; counting as empty verdict");
            return Ok(JudgeVerdict {
                judge_index: index,
                covered: BTreeSet::new(),
                evidence: BTreeMap::new(),
                dropped: vec![],
                malformed: true,
            });
        };
        Ok(restrict(index, parsed, job.candidates))
    }
}

fn restrict(index: usize, parsed: ParsedJudgeOutput, candidates: &[&Expectation]) -> JudgeVerdict {
    let canonical = |raw: &str| candidates.iter().find(|e| e.id.eq_ignore_ascii_case(raw)).map(|e| e.id.clone());
    let mut covered = BTreeSet::new();
    let mut dropped = Vec::new();
    for raw in parsed.ids {
        match canonical(&raw) {
            Some(id) => {
                covered.insert(id);
            }
            None => dropped.push(raw),
        }
    }
    if !dropped.is_empty() {
        tracing::info!(judge = index, ?dropped, "judge reported ids outside the candidate set");
    }
    let mut evidence = BTreeMap::new();
    for id in &covered {
        let quote = parsed
            .evidence
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(id))
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        evidence.insert(id.clone(), quote);
    }
    JudgeVerdict { judge_index: index, covered, evidence, dropped, malformed: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::fixtures;
    use crate::gateway::{FnGateway, LlmResponse, RecordingGateway, ScriptRule, ScriptedGateway};
    use crate::pipeline::PipelineConfig;
    use crate::prompts::PromptSet;

    #[test]
    fn parse_variants() {
        let p = parse_judge_output("reasoning...\nEVIDENCE e1: \"slope is speed\"\ncovered:  e1 , E2 ").unwrap();
        assert_eq!(p.ids, vec!["e1", "E2"]);
        assert_eq!(p.evidence["e1"], "slope is speed");
        assert_eq!(parse_judge_output("COVERED: none").unwrap().ids, Vec::<String>::new());
        assert_eq!(parse_judge_output("Covered:").unwrap().ids, Vec::<String>::new());
        assert!(parse_judge_output("I think e1 is covered").is_none());
        // last line wins
        assert_eq!(parse_judge_output("COVERED: e1\nCOVERED: e2").unwrap().ids, vec!["e2"]);
    }

    #[test]
    fn aggregation_examples() {
        let u = aggregate(vec![JudgeVerdict::new(0, &["e1"]), JudgeVerdict::new(1, &["e2"])], AggregationRule::Union);
        assert_eq!(u.covered, ["e1", "e2"].iter().map(|s| s.to_string()).collect());
        let single = aggregate(vec![JudgeVerdict::new(0, &["e1"])], AggregationRule::Union);
        assert_eq!(single.covered.len(), 1);
        let m = aggregate(
            vec![JudgeVerdict::new(0, &["e1", "e2"]), JudgeVerdict::new(1, &["e1"]), JudgeVerdict::new(2, &[])],
            AggregationRule::Majority,
        );
        assert_eq!(m.covered, ["e1"].iter().map(|s| s.to_string()).collect());
    }

    fn stage() -> crate::content::Stage {
        fixtures::stage("s1", &["e1", "e2"])
    }

    #[test]
    fn two_judges_union_with_seeded_scripts() {
        let gw = RecordingGateway::new(
            ScriptedGateway::new(vec![
                ScriptRule::respond(RoleTag::Judge, "", "COVERED: e1").with_seed(0),
                ScriptRule::respond(RoleTag::Judge, "", "COVERED: e2").with_seed(1),
            ])
            .unwrap(),
        );
        let prompts = PromptSet::default();
        let config = PipelineConfig { n_judges: 2, ..Default::default() };
        let agents = Agents::new(&gw, &prompts, &config);
        let act = fixtures::activity("A", vec![stage()]);
        let mut calls = vec![];
        let v = agents
            .judge_expectations(&UserMessage::text("s", "answer"), &act, &act.stages[0], &[], 2, &mut calls)
            .unwrap();
        assert_eq!(v.covered.len(), 2);
        assert_eq!(gw.count(RoleTag::Judge), 2);
        assert_eq!(calls.len(), 2);
        let mut idx: Vec<_> = v.per_judge.iter().map(|j| j.judge_index).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn hallucinated_ids_are_dropped() {
        let gw = FnGateway(|_: &LlmRequest| Ok(LlmResponse { text: "COVERED: e1, e9, stage2".into() }));
        let prompts = PromptSet::default();
        let config = PipelineConfig::default();
        let agents = Agents::new(&gw, &prompts, &config);
        let act = fixtures::activity("A", vec![stage()]);
        let mut calls = vec![];
        let v = agents
            .judge_expectations(&UserMessage::text("s", "x"), &act, &act.stages[0], &[], 3, &mut calls)
            .unwrap();
        assert_eq!(v.covered.iter().collect::<Vec<_>>(), vec!["e1"]);
        assert!(v.per_judge.iter().all(|j| j.dropped == vec!["e9", "stage2"]));
        assert!(v.per_judge.iter().all(|j| j.evidence.contains_key("e1")));
    }

    #[test]
    fn malformed_output_after_repair_is_empty_verdict() {
        let gw = RecordingGateway::new(FnGateway(|_: &LlmRequest| Ok(LlmResponse { text: "looks good".into() })));
        let prompts = PromptSet::default();
        let config = PipelineConfig::default();
        let agents = Agents::new(&gw, &prompts, &config);
        let act = fixtures::activity("A", vec![stage()]);
        let mut calls = vec![];
        let v = agents
            .judge_expectations(&UserMessage::text("s", "x"), &act, &act.stages[0], &[], 1, &mut calls)
            .unwrap();
        assert!(v.covered.is_empty());
        assert!(v.per_judge[0].malformed);
        assert_eq!(gw.requests().len(), 2);
    }
}
