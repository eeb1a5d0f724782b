//! The harmonization agent loop.
//!
//! A [`Planner`] proposes one [`AgentAction`] per step; tool calls run against
//! the [`ToolRegistry`], questions queue for the user, and `Finish` ends the
//! session once the mapping spec is approved. Every call, decision, question
//! and answer is appended to the session's provenance log.

mod planner;
mod remote;
mod review;
mod reviewer;
pub(crate) mod tools;

pub use planner::{Planner, Playbook, PlaybookAnswers, PlaybookOutput, PlaybookSource, ScriptedPlanner, Unanswered};
pub use remote::{RemoteConfig, RemoteReviewer, ENV_KEY, ENV_MODEL, ENV_URL};
pub use review::{review_column_matches, review_value_matches};
pub use reviewer::{
    Candidate, CorrectionTable, Flag, MockReviewer, Resolution, ReviewItem, Reviewer, ReviewerError, DEFAULT_THRESHOLD,
};
pub use tools::{register_tools, ToolContext, ToolError, ToolFn, ToolRegistry, ToolSpec};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::mapspec::{Diagnostic, MappingSpec};
use crate::matchers::{similarity, ColumnMatch, MatchMethod, ValueMatchTable};
use crate::provenance::{sha256_hex, ProvenanceError, ProvenanceLog, RecordKind};
use crate::table::Table;
use crate::vocab::{load_vocabulary, TargetSchema, VocabError};

pub const DEFAULT_MAX_STEPS: usize = 64;
pub const ALTERNATIVES_K: usize = 10;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("step limit of {0} reached; session aborted")]
    MaxStepsExceeded(usize),
    #[error("waiting for answers to {0} pending question(s)")]
    AwaitingUser(usize),
    #[error("session already finished")]
    Finished,
    #[error("cannot finish: {0}")]
    FinishRejected(String),
    #[error("unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("question `{0}` is already closed")]
    QuestionClosed(String),
    #[error("answer `{answer}` is not among the options of question `{question}`")]
    InvalidAnswer { question: String, answer: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("vocabulary: {0}")]
    Vocabulary(#[from] VocabError),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
}

/// The match a decision is about: a column, or one value of a column.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl Subject {
    pub fn column(column: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            value: None,
        }
    }

    pub fn value(column: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            value: Some(value.into()),
        }
    }
}

impl std::fmt::Display for Subject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.value {
            None => write!(f, "column `{}`", self.column),
            Some(v) => write!(f, "value `{v}` of column `{}`", self.column),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Replace { target: String },
    Escalate { question: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub subject: Subject,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

/// A question routed to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub subject: Subject,
    pub text: String,
    pub current: Option<String>,
    pub options: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
    /// Sequence number of the `question` record, once asked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub tool: String,
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    /// `call_id` is assigned by the registry when the call runs.
    ToolCall {
        tool: String,
        args: Value,
    },
    AskUser(Question),
    Finish {
        summary: String,
    },
}

/// Where a session stands in the harmonization workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    TablesLoaded,
    SchemaMatched,
    ValuesMatched,
    SpecBuilt,
    Materialized,
}

/// Settings recorded in the first provenance record of a session.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub prompt: String,
    /// Base for relative input paths; recorded in provenance.
    pub input_dir: PathBuf,
    /// Base for relative output paths; not recorded.
    pub output_dir: PathBuf,
    /// Vocabulary file, relative to `input_dir` unless absolute.
    pub vocabulary: PathBuf,
    pub method: MatchMethod,
    pub max_steps: usize,
    pub reviewer: String,
}

impl SessionConfig {
    pub fn new(vocabulary: impl Into<PathBuf>) -> Self {
        Self {
            prompt: String::new(),
            input_dir: PathBuf::from("."),
            output_dir: PathBuf::from("."),
            vocabulary: vocabulary.into(),
            method: MatchMethod::default(),
            max_steps: DEFAULT_MAX_STEPS,
            reviewer: String::from("none"),
        }
    }
}

/// Everything the agent knows about one harmonization session.
#[derive(Debug)]
pub struct SessionState {
    pub schema: TargetSchema,
    pub tables: BTreeMap<String, Table>,
    pub source: Option<String>,
    pub method: MatchMethod,
    pub column_matches: Vec<ColumnMatch>,
    pub value_tables: Vec<ValueMatchTable>,
    pub columns_reviewed: bool,
    pub values_reviewed: bool,
    /// Escalations the planner has not yet put to the user.
    pub escalations: VecDeque<Question>,
    pub pending_questions: VecDeque<Question>,
    pub closed_questions: BTreeSet<String>,
    pub user_decided: BTreeSet<Subject>,
    pub spec: Option<MappingSpec>,
    pub diagnostics: Option<Vec<Diagnostic>>,
    pub spec_approved: bool,
    pub materialized: Option<String>,
    /// Written artifacts: relative path -> sha256.
    pub artifacts: BTreeMap<String, String>,
    pub last_error: Option<String>,
    pub step_count: usize,
    pub max_steps: usize,
    pub finished: bool,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub log: ProvenanceLog,
    next_call: u64,
    next_question: u64,
}

impl SessionState {
    /// Loads the vocabulary and writes the opening `user_prompt` record,
    /// which carries the vocabulary's content hash.
    pub fn start(config: SessionConfig, mut log: ProvenanceLog) -> Result<Self, AgentError> {
        let vocab_path = resolve(&config.input_dir, &config.vocabulary);
        let bytes = std::fs::read(&vocab_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                VocabError::NotFound(vocab_path.clone())
            } else {
                VocabError::Io(e.to_string())
            }
        })?;
        let schema = load_vocabulary(&vocab_path)?;
        log.append(
            RecordKind::UserPrompt,
            json!({
                "prompt": config.prompt,
                "input_dir": path_text(&config.input_dir),
                "vocabulary": {
                    "path": path_text(&config.vocabulary),
                    "sha256": sha256_hex(&bytes),
                    "name": schema.name(),
                },
                "method": config.method.to_string(),
                "max_steps": config.max_steps,
                "reviewer": config.reviewer,
            }),
            None,
        )?;
        Ok(Self::with_schema(schema, config, log))
    }

    pub(crate) fn with_schema(schema: TargetSchema, config: SessionConfig, log: ProvenanceLog) -> Self {
        Self {
            schema,
            tables: BTreeMap::new(),
            source: None,
            method: config.method,
            column_matches: Vec::new(),
            value_tables: Vec::new(),
            columns_reviewed: false,
            values_reviewed: false,
            escalations: VecDeque::new(),
            pending_questions: VecDeque::new(),
            closed_questions: BTreeSet::new(),
            user_decided: BTreeSet::new(),
            spec: None,
            diagnostics: None,
            spec_approved: false,
            materialized: None,
            artifacts: BTreeMap::new(),
            last_error: None,
            step_count: 0,
            max_steps: config.max_steps,
            finished: false,
            input_dir: config.input_dir,
            output_dir: config.output_dir,
            log,
            next_call: 0,
            next_question: 0,
        }
    }

    pub fn session_id(&self) -> &str {
        self.log.session_id()
    }

    pub fn phase(&self) -> Phase {
        if self.materialized.is_some() {
            Phase::Materialized
        } else if self.spec.is_some() {
            Phase::SpecBuilt
        } else if !self.value_tables.is_empty() {
            Phase::ValuesMatched
        } else if !self.column_matches.is_empty() {
            Phase::SchemaMatched
        } else if !self.tables.is_empty() {
            Phase::TablesLoaded
        } else {
            Phase::Created
        }
    }

    pub fn source_table(&self) -> Option<&Table> {
        self.source.as_ref().and_then(|s| self.tables.get(s))
    }

    pub fn resolve_input(&self, path: &str) -> PathBuf {
        resolve(&self.input_dir, Path::new(path))
    }

    pub fn resolve_output(&self, path: &str) -> PathBuf {
        resolve(&self.output_dir, Path::new(path))
    }

    pub fn column_match(&self, column: &str) -> Option<&ColumnMatch> {
        self.column_matches.iter().find(|m| m.source_column == column)
    }

    pub fn value_table(&self, column: &str) -> Option<&ValueMatchTable> {
        self.value_tables.iter().find(|t| t.source_column == column)
    }

    /// Current target of a subject, as JSON (`null` for abstentions).
    pub fn match_json(&self, subject: &Subject) -> Option<Value> {
        match &subject.value {
            None => self
                .column_match(&subject.column)
                .map(|m| serde_json::to_value(m).expect("match serializes")),
            Some(v) => self
                .value_table(&subject.column)
                .and_then(|t| t.get(v))
                .map(|m| serde_json::to_value(m).expect("match serializes")),
        }
    }

    pub fn current_target(&self, subject: &Subject) -> Option<Option<String>> {
        match &subject.value {
            None => self.column_match(&subject.column).map(|m| m.target_attribute.clone()),
            Some(v) => self
                .value_table(&subject.column)
                .and_then(|t| t.get(v))
                .map(|m| m.target_value.clone()),
        }
    }

    /// Permissible replacement targets for a subject: attribute names for
    /// columns, the attribute's enumerated domain for values.
    pub fn allowed_targets(&self, subject: &Subject) -> Vec<String> {
        match &subject.value {
            None => self.schema.attribute_names().into_iter().map(str::to_string).collect(),
            Some(_) => self
                .value_table(&subject.column)
                .and_then(|t| self.schema.attribute(&t.target_attribute))
                .and_then(|a| a.domain.values())
                .map(<[String]>::to_vec)
                .unwrap_or_default(),
        }
    }

    /// Similarity of a subject to a prospective target under the session method.
    pub fn score_for(&self, subject: &Subject, target: &str) -> f64 {
        let corpus = self.allowed_targets(subject);
        let query = subject.value.as_deref().unwrap_or(&subject.column);
        similarity(query, target, self.method, &corpus)
    }

    /// Installs `target` for `subject`. Downstream artifacts (value tables after
    /// a column change, the spec after any change) are invalidated.
    pub(crate) fn install_target(&mut self, subject: &Subject, target: &str, score: f64) -> Result<(), AgentError> {
        if !self.allowed_targets(subject).iter().any(|t| t == target) {
            return Err(AgentError::InvalidDecision(format!(
                "`{target}` is not a permissible target for {subject}"
            )));
        }
        match &subject.value {
            None => {
                let m = self
                    .column_matches
                    .iter_mut()
                    .find(|m| m.source_column == subject.column)
                    .ok_or_else(|| AgentError::InvalidDecision(format!("no match for {subject}")))?;
                let changed = m.target_attribute.as_deref() != Some(target);
                m.replace(target, score);
                if changed {
                    self.value_tables.retain(|t| t.source_column != subject.column);
                }
            }
            Some(v) => {
                let m = self
                    .value_tables
                    .iter_mut()
                    .find(|t| t.source_column == subject.column)
                    .and_then(|t| t.get_mut(v))
                    .ok_or_else(|| AgentError::InvalidDecision(format!("no match for {subject}")))?;
                m.replace(target, score);
            }
        }
        self.invalidate_spec();
        Ok(())
    }

    pub(crate) fn invalidate_spec(&mut self) {
        self.spec = None;
        self.diagnostics = None;
        self.spec_approved = false;
        self.materialized = None;
    }

    pub(crate) fn next_call_id(&mut self) -> String {
        let id = format!("c{}", self.next_call);
        self.next_call += 1;
        id
    }

    pub(crate) fn next_question_id(&mut self) -> String {
        self.next_question += 1;
        format!("q{}", self.next_question)
    }

    pub(crate) fn set_counters(&mut self, next_call: u64, next_question: u64) {
        self.next_call = next_call;
        self.next_question = next_question;
    }

    fn find_question_seq(&self, subject: &Subject) -> Option<u64> {
        self.pending_questions
            .iter()
            .find(|q| &q.subject == subject)
            .and_then(|q| q.seq)
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Logs `question` and queues it for the user, removing it from the
/// unasked escalations.
pub fn ask_user(state: &mut SessionState, mut question: Question) -> Result<u64, AgentError> {
    state.escalations.retain(|q| q.id != question.id);
    let seq = state.log.append(
        RecordKind::Question,
        serde_json::to_value(&question).expect("question serializes"),
        None,
    )?;
    question.seq = Some(seq);
    state.pending_questions.push_back(question);
    Ok(seq)
}

/// Applies the user's answer to a pending question. Accepted answers: `yes`
/// (take the suggestion), `no`/`keep` (keep the current target), a 1-based
/// option number, or an option's target name.
pub fn apply_user_answer(state: &mut SessionState, question_id: &str, answer: &str) -> Result<(), AgentError> {
    if state.closed_questions.contains(question_id) {
        return Err(AgentError::QuestionClosed(question_id.to_string()));
    }
    let pos = state
        .pending_questions
        .iter()
        .position(|q| q.id == question_id)
        .ok_or_else(|| AgentError::UnknownQuestion(question_id.to_string()))?;
    let question = state.pending_questions[pos].clone();
    let invalid = || AgentError::InvalidAnswer {
        question: question_id.to_string(),
        answer: answer.to_string(),
    };
    let trimmed = answer.trim();
    let choice: Option<&Candidate> = match trimmed.to_ascii_lowercase().as_str() {
        "yes" | "y" | "accept" => {
            let s = question.suggestion.as_deref().ok_or_else(invalid)?;
            Some(question.options.iter().find(|c| c.target == s).ok_or_else(invalid)?)
        }
        "no" | "n" | "keep" => None,
        _ => {
            if let Ok(i) = trimmed.parse::<usize>() {
                Some(question.options.get(i.wrapping_sub(1)).ok_or_else(invalid)?)
            } else {
                Some(
                    question
                        .options
                        .iter()
                        .find(|c| c.target == trimmed)
                        .ok_or_else(invalid)?,
                )
            }
        }
    };
    let verdict = match choice {
        Some(c) if Some(c.target.as_str()) != question.current.as_deref() => Verdict::Replace {
            target: c.target.clone(),
        },
        _ => Verdict::Keep,
    };
    let answer_seq = state.log.append(
        RecordKind::Answer,
        json!({"question_id": question.id, "answer": trimmed}),
        question.seq,
    )?;
    record_user_decision(
        state,
        &question.subject,
        verdict,
        choice.map(|c| c.score),
        Some(&question.id),
        Some(answer_seq),
    )?;
    state.pending_questions.remove(pos);
    state.closed_questions.insert(question.id);
    Ok(())
}

/// A direct user decision on a match, outside any question. Closes any pending
/// question about the same subject.
pub fn apply_user_decision(state: &mut SessionState, subject: &Subject, verdict: Verdict) -> Result<(), AgentError> {
    if state.current_target(subject).is_none() {
        return Err(AgentError::InvalidDecision(format!("no match for {subject}")));
    }
    if let Verdict::Escalate { .. } = verdict {
        return Err(AgentError::InvalidDecision("users cannot escalate".into()));
    }
    let parent = state.find_question_seq(subject);
    record_user_decision(state, subject, verdict, None, None, parent)?;
    let closed: Vec<String> = state
        .pending_questions
        .iter()
        .filter(|q| &q.subject == subject)
        .map(|q| q.id.clone())
        .collect();
    state.pending_questions.retain(|q| &q.subject != subject);
    state.escalations.retain(|q| &q.subject != subject);
    state.closed_questions.extend(closed);
    Ok(())
}

fn record_user_decision(
    state: &mut SessionState,
    subject: &Subject,
    verdict: Verdict,
    score: Option<f64>,
    question_id: Option<&str>,
    parent: Option<u64>,
) -> Result<(), AgentError> {
    let before = state.match_json(subject).unwrap_or(Value::Null);
    if let Verdict::Replace { target } = &verdict {
        let score = score.unwrap_or_else(|| state.score_for(subject, target));
        state.install_target(subject, target, score)?;
    }
    let after = state.match_json(subject).unwrap_or(Value::Null);
    let mut payload = json!({
        "subject": subject,
        "decision": verdict,
        "before": before,
        "after": after,
    });
    if let Some(q) = question_id {
        payload["question_id"] = json!(q);
    }
    state.log.append(RecordKind::UserDecision, payload, parent)?;
    state.user_decided.insert(subject.clone());
    Ok(())
}

/// Outcome of [`Agent::run`].
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Finished { summary: String, steps: usize },
    Paused { pending: Vec<String> },
}

/// Planner, reviewer and tool registry driving one session.
pub struct Agent {
    pub registry: ToolRegistry,
    pub planner: Box<dyn Planner>,
    pub reviewer: Box<dyn Reviewer>,
}

impl Agent {
    pub fn new(planner: Box<dyn Planner>, reviewer: Box<dyn Reviewer>) -> Self {
        Self {
            registry: register_tools(),
            planner,
            reviewer,
        }
    }

    /// Runs one planner action. Tool failures are recorded, kept in
    /// `state.last_error` for the planner, and do not end the loop.
    pub fn step(&mut self, state: &mut SessionState) -> Result<AgentAction, AgentError> {
        if state.finished {
            return Err(AgentError::Finished);
        }
        if !state.pending_questions.is_empty() {
            return Err(AgentError::AwaitingUser(state.pending_questions.len()));
        }
        if state.step_count >= state.max_steps {
            return Err(AgentError::MaxStepsExceeded(state.max_steps));
        }
        state.step_count += 1;
        let action = self.planner.next_action(state);
        match &action {
            AgentAction::ToolCall { tool, args } => {
                let mut ctx = ToolContext::new(state, &self.registry, Some(self.reviewer.as_mut()));
                match ctx.invoke(tool, args.clone()) {
                    Ok(_) => state.last_error = None,
                    Err(ToolError::Provenance(e)) => return Err(AgentError::Provenance(e)),
                    Err(e) => state.last_error = Some(e.to_string()),
                }
            }
            AgentAction::AskUser(question) => {
                ask_user(state, question.clone())?;
            }
            AgentAction::Finish { .. } => {
                if !state.escalations.is_empty() {
                    return Err(AgentError::FinishRejected("unasked escalations remain".into()));
                }
                if !state.spec_approved {
                    let reason = match &state.last_error {
                        Some(e) => format!("no approved mapping spec (last error: {e})"),
                        None => "no approved mapping spec".into(),
                    };
                    return Err(AgentError::FinishRejected(reason));
                }
                state.finished = true;
            }
        }
        Ok(action)
    }

    /// Steps until `Finish`, answering questions through `answer`. Returns
    /// `Paused` when `answer` declines a question.
    pub fn run(
        &mut self,
        state: &mut SessionState,
        answer: &mut dyn FnMut(&Question) -> Option<String>,
    ) -> Result<RunOutcome, AgentError> {
        loop {
            while let Some(q) = state.pending_questions.front().cloned() {
                match answer(&q) {
                    Some(a) => apply_user_answer(state, &q.id, &a)?,
                    None => {
                        return Ok(RunOutcome::Paused {
                            pending: state.pending_questions.iter().map(|q| q.id.clone()).collect(),
                        })
                    }
                }
            }
            if let AgentAction::Finish { summary } = self.step(state)? {
                return Ok(RunOutcome::Finished {
                    summary,
                    steps: state.step_count,
                });
            }
        }
    }
}
