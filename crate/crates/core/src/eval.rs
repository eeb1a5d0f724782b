//! Accuracy, precision, recall and F1 of predicted matches against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown task `{0}` (expected schema_matching or value_mapping)")]
    UnknownTask(String),
    #[error("{what}: {reason}")]
    BadMapping { what: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    SchemaMatching,
    ValueMapping,
}

impl FromStr for EvalTask {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "schema_matching" | "schema" => Ok(EvalTask::SchemaMatching),
            "value_mapping" | "value" | "values" => Ok(EvalTask::ValueMapping),
            other => Err(EvalError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalTask::SchemaMatching => "schema_matching",
            EvalTask::ValueMapping => "value_mapping",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub num_predicted: usize,
    pub num_correct: usize,
    pub num_truth: usize,
    pub num_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: EvalCounts,
}

/// Item -> target, `None` for an abstention. Value-mapping items are keyed by
/// (column, value); schema items by (column, None).
pub type Assignment = BTreeMap<(String, Option<String>), Option<String>>;

/// Scores `pred` against `truth`. Items are the union of both key sets. A
/// prediction is correct when it is non-null and equals the truth; for
/// accuracy, abstaining on an item whose truth is null or absent also counts.
pub fn evaluate(task: EvalTask, pred: &Assignment, truth: &Assignment) -> EvalReport {
    let items: BTreeSet<_> = pred.keys().chain(truth.keys()).collect();
    let mut counts = EvalCounts {
        num_predicted: 0,
        num_correct: 0,
        num_truth: 0,
        num_items: items.len(),
    };
    let mut right_decisions = 0usize;
    for item in items {
        let p = pred.get(item).cloned().flatten();
        let t = truth.get(item).cloned().flatten();
        counts.num_predicted += p.is_some() as usize;
        counts.num_truth += t.is_some() as usize;
        if p.is_some() && p == t {
            counts.num_correct += 1;
        }
        if p == t {
            right_decisions += 1;
        }
    }
    let ratio = |a: usize, b: usize| a as f64 / b as f64;
    let precision = match (counts.num_predicted, counts.num_truth) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (p, _) => ratio(counts.num_correct, p),
    };
    let recall = match counts.num_truth {
        0 => 1.0,
        t => ratio(counts.num_correct, t),
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = match counts.num_items {
        0 => 1.0,
        n => ratio(right_decisions, n),
    };
    EvalReport {
        task,
        accuracy,
        precision,
        recall,
        f1,
        counts,
    }
}

fn bad(what: &str, reason: impl Into<String>) -> EvalError {
    EvalError::BadMapping {
        what: what.to_string(),
        reason: reason.into(),
    }
}

fn target_of(v: &Value, what: &str) -> Result<Option<String>, EvalError> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(s.clone())),
        other => Err(bad(what, format!("expected a string or null, got {other}"))),
    }
}

/// Reads a mapping for `task`. Accepted shapes:
///
/// * schema: `{"col": "attr" | null}` or the array printed by `match-schema`;
/// * values: `{"col": {"val": "target" | null}}` or the array printed by
///   `match-values`.
pub fn parse_assignment(task: EvalTask, value: &Value, what: &str) -> Result<Assignment, EvalError> {
    let mut out = Assignment::new();
    match (task, value) {
        (EvalTask::SchemaMatching, Value::Object(map)) => {
            for (col, t) in map {
                out.insert((col.clone(), None), target_of(t, what)?);
            }
        }
        (EvalTask::SchemaMatching, Value::Array(list)) => {
            for m in list {
                let col = m["source"]
                    .as_str()
                    .ok_or_else(|| bad(what, "match entry lacks `source`"))?;
                out.insert((col.to_string(), None), target_of(&m["target"], what)?);
            }
        }
        (EvalTask::ValueMapping, Value::Object(map)) => {
            for (col, values) in map {
                let values = values
                    .as_object()
                    .ok_or_else(|| bad(what, format!("`{col}` must map values to targets")))?;
                for (v, t) in values {
                    out.insert((col.clone(), Some(v.clone())), target_of(t, what)?);
                }
            }
        }
        (EvalTask::ValueMapping, Value::Array(tables)) => {
            for table in tables {
                let col = table["source_column"]
                    .as_str()
                    .ok_or_else(|| bad(what, "value table lacks `source_column`"))?;
                for m in table["matches"].as_array().into_iter().flatten() {
                    let v = m["source"]
                        .as_str()
                        .ok_or_else(|| bad(what, "value match lacks `source`"))?;
                    out.insert((col.to_string(), Some(v.to_string())), target_of(&m["target"], what)?);
                }
            }
        }
        _ => return Err(bad(what, "expected a JSON object or array")),
    }
    Ok(out)
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let c = &self.counts;
        format!(
            "task       {}\naccuracy   {:.4}\nprecision  {:.4}\nrecall     {:.4}\nf1         {:.4}\nitems      {}\npredicted  {}\ncorrect    {}\ntruth      {}\n",
            self.task, self.accuracy, self.precision, self.recall, self.f1, c.num_items, c.num_predicted, c.num_correct, c.num_truth
        )
    }
}
