//! Planners choose the next agent action from the session state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentAction, Question, SessionConfig, SessionState, DEFAULT_MAX_STEPS};
use crate::matchers::MatchMethod;

pub trait Planner: Send {
    fn next_action(&mut self, state: &SessionState) -> AgentAction;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookSource {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookOutput {
    /// Harmonized CSV, relative to the output directory.
    pub table: String,
    /// Mapping spec JSON, relative to the output directory.
    pub spec: String,
}

/// Canned answers to escalated questions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookAnswers {
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
    #[serde(default)]
    pub values: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unanswered {
    /// Keep the current target.
    #[default]
    Keep,
    /// Leave the question pending.
    Fail,
}

/// A scripted session: inputs, outputs, and answers to any questions.
/// Relative paths are resolved against the playbook's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Playbook {
    pub session_id: String,
    #[serde(default)]
    pub prompt: String,
    pub source: PlaybookSource,
    pub vocabulary: String,
    #[serde(default)]
    pub method: MatchMethod,
    /// Columns whose values are matched; all matched columns when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_columns: Option<Vec<String>>,
    pub output: PlaybookOutput,
    #[serde(default)]
    pub answers: PlaybookAnswers,
    #[serde(default)]
    pub unanswered: Unanswered,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Correction table for the mock reviewer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrections: Option<String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl Playbook {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut playbook: Playbook = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        playbook.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if playbook.base_dir.as_os_str().is_empty() {
            playbook.base_dir = PathBuf::from(".");
        }
        Ok(playbook)
    }

    pub fn source_name(&self) -> String {
        self.source.name.clone().unwrap_or_else(|| {
            Path::new(&self.source.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }

    pub fn session_config(&self, output_dir: impl Into<PathBuf>, reviewer: &str) -> SessionConfig {
        SessionConfig {
            prompt: self.prompt.clone(),
            input_dir: self.base_dir.clone(),
            output_dir: output_dir.into(),
            vocabulary: PathBuf::from(&self.vocabulary),
            method: self.method,
            max_steps: self.max_steps,
            reviewer: reviewer.to_string(),
        }
    }

    pub fn corrections_path(&self) -> Option<PathBuf> {
        self.corrections.as_ref().map(|c| self.base_dir.join(c))
    }

    /// The scripted answer to `question`, or `None` to leave it pending.
    pub fn answer_for(&self, question: &Question) -> Option<String> {
        let subject = &question.subject;
        let canned = match &subject.value {
            None => self.answers.columns.get(&subject.column),
            Some(v) => self.answers.values.get(&subject.column).and_then(|m| m.get(v)),
        };
        match (canned, self.unanswered) {
            (Some(a), _) => Some(a.clone()),
            (None, Unanswered::Keep) => Some("keep".into()),
            (None, Unanswered::Fail) => None,
        }
    }
}

/// Drives the fixed workflow: load, match columns, review, ask, match values,
/// review, ask, build and validate the spec, materialize, write, finish.
/// The next action is derived from the session state alone.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    playbook: Playbook,
}

impl ScriptedPlanner {
    pub fn new(playbook: Playbook) -> Self {
        Self { playbook }
    }

    fn call(tool: &str, args: Value) -> AgentAction {
        AgentAction::ToolCall {
            tool: tool.to_string(),
            args,
        }
    }

    fn value_columns(&self, state: &SessionState) -> Vec<String> {
        let matched = |c: &str| state.column_match(c).is_some_and(|m| m.target_attribute.is_some());
        match &self.playbook.value_columns {
            Some(cols) => cols.iter().filter(|c| matched(c)).cloned().collect(),
            None => state
                .column_matches
                .iter()
                .filter(|m| m.target_attribute.is_some())
                .map(|m| m.source_column.clone())
                .collect(),
        }
    }
}

impl Planner for ScriptedPlanner {
    fn next_action(&mut self, state: &SessionState) -> AgentAction {
        if let Some(err) = &state.last_error {
            return AgentAction::Finish {
                summary: format!("stopped after tool error: {err}"),
            };
        }
        let source = self.playbook.source_name();
        let target = state.schema.name().to_string();
        let method = state.method.to_string();
        if !state.tables.contains_key(&source) {
            let mut args = json!({"path": self.playbook.source.path, "name": source});
            if let Some(cols) = &self.playbook.source.columns {
                args["columns"] = json!(cols);
            }
            return Self::call("load_table", args);
        }
        if state.column_matches.is_empty() {
            return Self::call(
                "match_schema",
                json!({"source": source, "target": target, "method": method}),
            );
        }
        if !state.columns_reviewed {
            return Self::call("review_column_matches", json!({}));
        }
        if let Some(q) = state.escalations.front() {
            return AgentAction::AskUser(q.clone());
        }
        let value_columns = self.value_columns(state);
        if !value_columns.is_empty() && value_columns.iter().any(|c| state.value_table(c).is_none()) {
            return Self::call(
                "match_values",
                json!({"source": source, "target": target, "columns": value_columns, "method": method}),
            );
        }
        if !state.value_tables.is_empty() && !state.values_reviewed {
            return Self::call("review_value_matches", json!({}));
        }
        if state.spec.is_none() {
            return Self::call("build_spec", json!({}));
        }
        if state.diagnostics.is_none() {
            return Self::call("validate_spec", json!({"source": source}));
        }
        if !state.spec_approved {
            return AgentAction::Finish {
                summary: "mapping spec failed validation".into(),
            };
        }
        let output = format!("{source}_harmonized");
        if state.materialized.is_none() {
            return Self::call("materialize_mapping", json!({"source": source, "output": output}));
        }
        let out = &self.playbook.output;
        if !state.artifacts.contains_key(&out.table) {
            return Self::call("write_table", json!({"table": output, "path": out.table}));
        }
        if !state.artifacts.contains_key(&out.spec) {
            return Self::call("export_spec", json!({"path": out.spec}));
        }
        let corrected = state.column_matches.iter().filter(|m| m.is_corrected()).count()
            + state
                .value_tables
                .iter()
                .flat_map(|t| &t.matches)
                .filter(|m| m.is_corrected())
                .count();
        AgentAction::Finish {
            summary: format!(
                "Harmonized `{source}` into {} and wrote the mapping spec to {} ({corrected} corrected matches).",
                out.table, out.spec
            ),
        }
    }
}
