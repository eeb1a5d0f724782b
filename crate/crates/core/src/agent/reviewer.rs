//! Reviewers judge matcher output and propose corrections or escalations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::Subject;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReviewerError {
    #[error("reviewer transport error: {0}")]
    Transport(String),
    #[error("reviewer protocol error: {0}")]
    Protocol(String),
    #[error("reviewer configuration error: {0}")]
    Config(String),
}

/// One match as shown to a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReviewItem {
    pub subject: Subject,
    /// Target attribute, for value matches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    pub current: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub target: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Flag {
    Keep { rationale: String },
    Suspect { rationale: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Replace {
        target: String,
        rationale: String,
    },
    Escalate {
        question: String,
        suggestion: Option<String>,
        rationale: String,
    },
}

/// Two-pass review: `flag` marks suspicious items, then `resolve` sees the
/// suspicious ones with ranked alternatives attached.
pub trait Reviewer: Send {
    fn name(&self) -> String;

    /// One flag per item, in order.
    fn flag(&mut self, items: &[ReviewItem]) -> Result<Vec<Flag>, ReviewerError>;

    /// One resolution per item, in order.
    fn resolve(&mut self, items: &[(ReviewItem, Vec<Candidate>)]) -> Result<Vec<Resolution>, ReviewerError>;

    /// Raw exchanges since the last call, for the provenance log.
    fn take_transcript(&mut self) -> Vec<Value> {
        Vec::new()
    }
}

/// Correction-table file: `{"columns": {src: tgt}, "values": {col: {src: tgt}}, "threshold": x}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionTable {
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
    #[serde(default)]
    pub values: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl CorrectionTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReviewerError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ReviewerError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ReviewerError::Config(format!("{}: {e}", path.display())))
    }

    pub fn lookup(&self, subject: &Subject) -> Option<&str> {
        match &subject.value {
            None => self.columns.get(&subject.column),
            Some(v) => self.values.get(&subject.column).and_then(|m| m.get(v)),
        }
        .map(String::as_str)
    }
}

/// Deterministic reviewer: items below `threshold` are suspicious, and so is
/// any item whose correction-table entry disagrees with the current target.
/// Suspicious items with a table entry are replaced; the rest escalate.
#[derive(Debug, Clone)]
pub struct MockReviewer {
    pub threshold: f64,
    pub corrections: CorrectionTable,
}

impl MockReviewer {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            corrections: CorrectionTable::default(),
        }
    }

    pub fn with_corrections(corrections: CorrectionTable) -> Self {
        Self {
            threshold: corrections.threshold.unwrap_or(DEFAULT_THRESHOLD),
            corrections,
        }
    }
}

impl Reviewer for MockReviewer {
    fn name(&self) -> String {
        format!("mock(threshold={})", self.threshold)
    }

    fn flag(&mut self, items: &[ReviewItem]) -> Result<Vec<Flag>, ReviewerError> {
        Ok(items
            .iter()
            .map(|item| match self.corrections.lookup(&item.subject) {
                Some(fix) if item.current.as_deref() != Some(fix) => Flag::Suspect {
                    rationale: format!("correction table maps {} to `{fix}`", item.subject),
                },
                Some(_) => Flag::Keep {
                    rationale: "agrees with correction table".into(),
                },
                None if item.score < self.threshold => Flag::Suspect {
                    rationale: format!("score {:.3} below threshold {}", item.score, self.threshold),
                },
                None => Flag::Keep {
                    rationale: format!("score {:.3} meets threshold {}", item.score, self.threshold),
                },
            })
            .collect())
    }

    fn resolve(&mut self, items: &[(ReviewItem, Vec<Candidate>)]) -> Result<Vec<Resolution>, ReviewerError> {
        Ok(items
            .iter()
            .map(|(item, candidates)| match self.corrections.lookup(&item.subject) {
                Some(fix) => Resolution::Replace {
                    target: fix.to_string(),
                    rationale: format!("correction table maps {} to `{fix}`", item.subject),
                },
                None => {
                    let suggestion = candidates
                        .iter()
                        .find(|c| Some(c.target.as_str()) != item.current.as_deref())
                        .map(|c| c.target.clone());
                    let current = item.current.as_deref().unwrap_or("(none)");
                    Resolution::Escalate {
                        question: format!(
                            "{} is mapped to `{current}` with score {:.3}. Choose one of the ranked candidates, or keep the current target.",
                            capitalize(&item.subject.to_string()),
                            item.score
                        ),
                        suggestion,
                        rationale: "no correction available".into(),
                    }
                }
            })
            .collect())
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
