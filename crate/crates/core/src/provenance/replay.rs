//! Deterministic replay of a recorded session.
//!
//! Matcher and spec tool calls are re-executed and compared with their logged
//! results. Reviewer and user decisions are re-applied from their records, not
//! re-requested, and each one's `before`/`after` snapshots must match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use super::{sha256_hex, ProvenanceLog, ProvenanceRecord, RecordKind};
use crate::agent::tools::spec_value;
use crate::agent::{register_tools, Question, SessionConfig, SessionState, Subject, ToolContext, Verdict};
use crate::mapspec::MappingSpec;
use crate::vocab::load_vocabulary;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("incomplete log: {0}")]
    Incomplete(String),
    #[error("record {seq}: input `{path}` changed since it was recorded")]
    FixtureChanged { seq: u64, path: String },
    #[error("replay diverges at record {seq}: {detail}")]
    Divergence { seq: u64, detail: String },
    #[error("record {seq}: {detail}")]
    Malformed { seq: u64, detail: String },
}

/// Tools whose results depend only on their inputs.
const DETERMINISTIC: &[&str] = &[
    "load_table",
    "match_schema",
    "top_matches",
    "domain_of",
    "match_values",
    "build_spec",
    "validate_spec",
    "materialize_mapping",
    "union_tables",
];

/// Replays a complete log and returns the reproduced spec. `input_dir`
/// overrides the input directory recorded in the first record.
pub fn replay(records: &[ProvenanceRecord], input_dir: Option<&Path>) -> Result<MappingSpec, ReplayError> {
    let mut engine = Engine::start(records, input_dir, PathBuf::from("."), true)?;
    engine.run(records)?;
    engine
        .final_spec
        .ok_or_else(|| ReplayError::Incomplete("no spec artifact was recorded".into()))
}

/// Rebuilds a live session from its log so it can continue, e.g. after a
/// server restart. New records are appended to `log`.
pub fn restore(log: ProvenanceLog, input_dir: Option<&Path>, output_dir: PathBuf) -> Result<SessionState, ReplayError> {
    let records = log.records().to_vec();
    let mut engine = Engine::start(&records, input_dir, output_dir, false)?;
    engine.run(&records)?;
    let mut state = engine.state;
    let calls = records.iter().filter(|r| r.kind == RecordKind::ToolCall).count() as u64;
    state.set_counters(calls, engine.max_question);
    state.step_count = records
        .iter()
        .filter(|r| (r.kind == RecordKind::ToolCall && r.parent_seq.is_none()) || r.kind == RecordKind::Question)
        .count();
    state.log = log;
    Ok(state)
}

struct Engine {
    state: SessionState,
    strict: bool,
    final_spec: Option<MappingSpec>,
    max_question: u64,
    results: BTreeMap<u64, ProvenanceRecord>,
    calls: BTreeMap<u64, String>,
}

fn malformed(seq: u64, detail: impl Into<String>) -> ReplayError {
    ReplayError::Malformed {
        seq,
        detail: detail.into(),
    }
}

fn diverge(seq: u64, detail: impl Into<String>) -> ReplayError {
    ReplayError::Divergence {
        seq,
        detail: detail.into(),
    }
}

impl Engine {
    fn start(
        records: &[ProvenanceRecord],
        input_dir: Option<&Path>,
        output_dir: PathBuf,
        strict: bool,
    ) -> Result<Self, ReplayError> {
        let first = records
            .first()
            .ok_or_else(|| ReplayError::Incomplete("log is empty".into()))?;
        if first.kind != RecordKind::UserPrompt {
            return Err(ReplayError::Incomplete("log does not start with a user_prompt".into()));
        }
        let p = &first.payload;
        let input_dir = input_dir
            .map(Path::to_path_buf)
            .or_else(|| p["input_dir"].as_str().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let vocab_rel = p["vocabulary"]["path"]
            .as_str()
            .ok_or_else(|| malformed(0, "user_prompt lacks vocabulary.path"))?;
        let vocab_path = input_dir.join(vocab_rel);
        let bytes = std::fs::read(&vocab_path).map_err(|_| ReplayError::FixtureChanged {
            seq: 0,
            path: vocab_path.display().to_string(),
        })?;
        if p["vocabulary"]["sha256"].as_str() != Some(sha256_hex(&bytes).as_str()) {
            return Err(ReplayError::FixtureChanged {
                seq: 0,
                path: vocab_path.display().to_string(),
            });
        }
        let schema = load_vocabulary(&vocab_path).map_err(|e| malformed(0, e.to_string()))?;
        let mut config = SessionConfig::new(vocab_rel);
        config.prompt = p["prompt"].as_str().unwrap_or_default().to_string();
        config.input_dir = input_dir;
        config.output_dir = output_dir;
        if let Some(m) = p["method"].as_str() {
            config.method = m.parse().map_err(|e| malformed(0, format!("{e}")))?;
        }
        if let Some(n) = p["max_steps"].as_u64() {
            config.max_steps = n as usize;
        }
        config.reviewer = p["reviewer"].as_str().unwrap_or_default().to_string();
        let log = ProvenanceLog::in_memory(first.session_id.clone());
        let results = records
            .iter()
            .filter(|r| r.kind == RecordKind::ToolResult)
            .filter_map(|r| r.parent_seq.map(|p| (p, r.clone())))
            .collect();
        Ok(Self {
            state: SessionState::with_schema(schema, config, log),
            strict,
            final_spec: None,
            max_question: 0,
            results,
            calls: BTreeMap::new(),
        })
    }

    fn run(&mut self, records: &[ProvenanceRecord]) -> Result<(), ReplayError> {
        for r in &records[1..] {
            match r.kind {
                RecordKind::UserPrompt => return Err(malformed(r.seq, "second user_prompt")),
                RecordKind::ToolCall => self.tool_call(r)?,
                RecordKind::ToolResult => self.tool_result(r),
                RecordKind::ReviewerDecision => self.reviewer_decision(r)?,
                RecordKind::UserDecision => self.user_decision(r)?,
                RecordKind::Question => self.question(r)?,
                RecordKind::Answer => {}
                RecordKind::Artifact => self.artifact(r)?,
            }
        }
        Ok(())
    }

    fn tool_call(&mut self, r: &ProvenanceRecord) -> Result<(), ReplayError> {
        let tool = r.payload["tool"]
            .as_str()
            .ok_or_else(|| malformed(r.seq, "tool_call lacks tool"))?
            .to_string();
        self.calls.insert(r.seq, tool.clone());
        if r.parent_seq.is_some() {
            return Ok(());
        }
        let Some(logged) = self.results.get(&r.seq).cloned() else {
            if self.strict {
                return Err(ReplayError::Incomplete(format!("tool call {} has no result", r.seq)));
            }
            return Ok(());
        };
        match tool.as_str() {
            "review_column_matches" => self.state.escalations.retain(|q| q.subject.value.is_some()),
            "review_value_matches" => self.state.escalations.retain(|q| q.subject.value.is_none()),
            _ => {}
        }
        if !DETERMINISTIC.contains(&tool.as_str()) {
            return Ok(());
        }
        let registry = register_tools();
        let mut ctx = ToolContext::new(&mut self.state, &registry, None);
        let outcome = ctx.invoke(&tool, r.payload["args"].clone());
        let logged_ok = logged.payload["ok"].as_bool().unwrap_or(false);
        match (outcome, logged_ok) {
            (Ok(value), true) => {
                if tool == "load_table" && value["sha256"] != logged.payload["result"]["sha256"] {
                    return Err(ReplayError::FixtureChanged {
                        seq: r.seq,
                        path: r.payload["args"]["path"].as_str().unwrap_or_default().to_string(),
                    });
                }
                if value != logged.payload["result"] {
                    return Err(diverge(r.seq, format!("`{tool}` returned a different result")));
                }
            }
            (Err(_), false) => {}
            (Ok(_), false) => return Err(diverge(r.seq, format!("`{tool}` succeeded but was logged as failing"))),
            (Err(e), true) => {
                if tool == "load_table" {
                    return Err(ReplayError::FixtureChanged {
                        seq: r.seq,
                        path: r.payload["args"]["path"].as_str().unwrap_or_default().to_string(),
                    });
                }
                return Err(diverge(r.seq, format!("`{tool}` failed: {e}")));
            }
        }
        Ok(())
    }

    fn tool_result(&mut self, r: &ProvenanceRecord) {
        let ok = r.payload["ok"].as_bool().unwrap_or(false);
        match r.parent_seq.and_then(|p| self.calls.get(&p)).map(String::as_str) {
            Some("review_column_matches") if ok => self.state.columns_reviewed = true,
            Some("review_value_matches") if ok => self.state.values_reviewed = true,
            _ => {}
        }
    }

    /// Checks `before`, applies the verdict, checks `after`.
    fn apply(&mut self, r: &ProvenanceRecord, subject: &Subject, verdict: &Verdict) -> Result<(), ReplayError> {
        let current = self.state.match_json(subject).unwrap_or(Value::Null);
        if current != r.payload["before"] {
            return Err(diverge(
                r.seq,
                format!("state of {subject} differs from the recorded `before`"),
            ));
        }
        if let Verdict::Replace { target } = verdict {
            let score = r.payload["after"]["score"].as_f64().unwrap_or(0.0);
            self.state
                .install_target(subject, target, score)
                .map_err(|e| diverge(r.seq, e.to_string()))?;
        }
        let now = self.state.match_json(subject).unwrap_or(Value::Null);
        if now != r.payload["after"] {
            return Err(diverge(
                r.seq,
                format!("state of {subject} differs from the recorded `after`"),
            ));
        }
        Ok(())
    }

    fn reviewer_decision(&mut self, r: &ProvenanceRecord) -> Result<(), ReplayError> {
        let decision: crate::agent::ReviewDecision =
            serde_json::from_value(r.payload.clone()).map_err(|e| malformed(r.seq, e.to_string()))?;
        self.apply(r, &decision.subject, &decision.verdict)?;
        if let Verdict::Escalate { question } = &decision.verdict {
            let id = r.payload["question_id"]
                .as_str()
                .ok_or_else(|| malformed(r.seq, "escalation lacks question_id"))?
                .to_string();
            self.note_question_id(&id);
            self.state.escalations.push_back(Question {
                id,
                subject: decision.subject.clone(),
                text: question.clone(),
                current: self.state.current_target(&decision.subject).flatten(),
                options: decision.candidates.clone(),
                suggestion: decision.suggestion.clone(),
                seq: None,
            });
        }
        Ok(())
    }

    fn user_decision(&mut self, r: &ProvenanceRecord) -> Result<(), ReplayError> {
        let subject: Subject =
            serde_json::from_value(r.payload["subject"].clone()).map_err(|e| malformed(r.seq, e.to_string()))?;
        let verdict: Verdict =
            serde_json::from_value(r.payload["decision"].clone()).map_err(|e| malformed(r.seq, e.to_string()))?;
        self.apply(r, &subject, &verdict)?;
        let state = &mut self.state;
        state.user_decided.insert(subject.clone());
        let mut closed: Vec<String> = state
            .pending_questions
            .iter()
            .filter(|q| q.subject == subject)
            .map(|q| q.id.clone())
            .collect();
        if let Some(q) = r.payload["question_id"].as_str() {
            closed.push(q.to_string());
        }
        state.pending_questions.retain(|q| q.subject != subject);
        state.escalations.retain(|q| q.subject != subject);
        state.closed_questions.extend(closed);
        Ok(())
    }

    fn question(&mut self, r: &ProvenanceRecord) -> Result<(), ReplayError> {
        let mut q: Question = serde_json::from_value(r.payload.clone()).map_err(|e| malformed(r.seq, e.to_string()))?;
        q.seq = Some(r.seq);
        self.note_question_id(&q.id);
        self.state.escalations.retain(|e| e.id != q.id);
        self.state.pending_questions.push_back(q);
        Ok(())
    }

    fn note_question_id(&mut self, id: &str) {
        if let Some(n) = id.strip_prefix('q').and_then(|n| n.parse::<u64>().ok()) {
            self.max_question = self.max_question.max(n);
        }
    }

    fn artifact(&mut self, r: &ProvenanceRecord) -> Result<(), ReplayError> {
        let p = &r.payload;
        let path = p["path"].as_str().unwrap_or_default().to_string();
        let sha = p["sha256"].as_str().unwrap_or_default().to_string();
        match p["kind"].as_str() {
            Some("spec") => {
                let current = self
                    .state
                    .spec
                    .as_ref()
                    .ok_or_else(|| diverge(r.seq, "spec artifact recorded but no spec was rebuilt"))?;
                if spec_value(current) != p["spec"] {
                    return Err(diverge(r.seq, "rebuilt spec differs from the recorded artifact"));
                }
                self.final_spec = Some(current.clone());
                self.state.artifacts.insert(path, sha);
            }
            Some("table") => {
                let name = p["table"].as_str().unwrap_or_default();
                let table = self
                    .state
                    .tables
                    .get(name)
                    .ok_or_else(|| diverge(r.seq, format!("table `{name}` was not rebuilt")))?;
                if sha256_hex(table.to_csv_string().as_bytes()) != sha {
                    return Err(diverge(
                        r.seq,
                        format!("rebuilt table `{name}` differs from the recorded artifact"),
                    ));
                }
                self.state.artifacts.insert(path, sha);
            }
            _ => {}
        }
        Ok(())
    }
}
