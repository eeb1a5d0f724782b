//! Schema matching, top-k candidate retrieval, and value matching.
//!
//! Matchers are policy-free: they never apply score thresholds and never
//! enforce one-to-one assignments. Ties are always broken by ascending
//! target name so results are reproducible.

mod similarity;

pub use similarity::{
    char_ngrams, normalize_name, similarity, MatchMethod, MethodParseError, Scorer, TfidfModel, TfidfVector,
    DEFAULT_NGRAM,
};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::table::{Table, TableError};
use crate::vocab::{Domain, TargetSchema};

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("target schema `{0}` has no attributes")]
    EmptySchema(String),
    #[error("source table has no columns")]
    NoColumns,
    #[error("column `{0}` not found in source table")]
    UnknownColumn(String),
    #[error("attribute `{0}` not found in target schema")]
    UnknownAttribute(String),
    #[error("k must be positive")]
    ZeroK,
}

impl From<TableError> for MatcherError {
    fn from(e: TableError) -> Self {
        match e {
            TableError::UnknownColumn(c) => MatcherError::UnknownColumn(c),
            other => MatcherError::UnknownColumn(other.to_string()),
        }
    }
}

/// Records that a match was changed after the matcher produced it.
/// `from` is the matcher's original choice (`None` for an abstention).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Correction {
    pub from: Option<String>,
}

fn install(target: &mut Option<String>, correction: &mut Option<Correction>, new_target: Option<String>) {
    let original = match correction.take() {
        Some(c) => c.from,
        None => target.clone(),
    };
    if new_target != original {
        *correction = Some(Correction { from: original });
    }
    *target = new_target;
}

/// Correspondence between a source column and a target attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMatch {
    pub source_column: String,
    pub target_attribute: Option<String>,
    pub score: f64,
    pub method: MatchMethod,
    pub correction: Option<Correction>,
}

impl ColumnMatch {
    pub fn is_corrected(&self) -> bool {
        self.correction.is_some()
    }

    pub fn corrected_from(&self) -> Option<&str> {
        self.correction.as_ref().and_then(|c| c.from.as_deref())
    }

    /// Installs `new_target`, keeping the matcher's original choice in the
    /// correction record. Reverting to the original clears the correction.
    pub fn replace(&mut self, new_target: impl Into<String>, score: f64) {
        install(
            &mut self.target_attribute,
            &mut self.correction,
            Some(new_target.into()),
        );
        self.score = score;
    }
}

/// Correspondence between a source value and a permissible target value.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatch {
    pub source_value: String,
    pub target_value: Option<String>,
    pub score: f64,
    pub method: MatchMethod,
    pub correction: Option<Correction>,
}

impl ValueMatch {
    pub fn is_corrected(&self) -> bool {
        self.correction.is_some()
    }

    pub fn corrected_from(&self) -> Option<&str> {
        self.correction.as_ref().and_then(|c| c.from.as_deref())
    }

    pub fn replace(&mut self, new_target: impl Into<String>, score: f64) {
        install(&mut self.target_value, &mut self.correction, Some(new_target.into()));
        self.score = score;
    }
}

/// Value matches for one (source column, target attribute) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMatchTable {
    pub source_column: String,
    pub target_attribute: String,
    pub method: MatchMethod,
    /// Set when the attribute has no enumerated domain; `matches` is then empty.
    #[serde(default)]
    pub skipped: bool,
    pub matches: Vec<ValueMatch>,
}

impl ValueMatchTable {
    pub fn get(&self, source_value: &str) -> Option<&ValueMatch> {
        self.matches.iter().find(|m| m.source_value == source_value)
    }

    pub fn get_mut(&mut self, source_value: &str) -> Option<&mut ValueMatch> {
        self.matches.iter_mut().find(|m| m.source_value == source_value)
    }
}

// JSON form shared by column and value matches:
// source, target, score, method, corrected, corrected_from (absent unless corrected).

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatch {
    source: String,
    target: Option<String>,
    score: f64,
    method: MatchMethod,
    corrected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present")]
    corrected_from: Option<Option<String>>,
}

fn present<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<String>>, D::Error> {
    Option::<String>::deserialize(d).map(Some)
}

fn to_raw(
    source: &str,
    target: &Option<String>,
    score: f64,
    method: MatchMethod,
    correction: &Option<Correction>,
) -> RawMatch {
    RawMatch {
        source: source.to_string(),
        target: target.clone(),
        score,
        method,
        corrected: correction.is_some(),
        corrected_from: correction.as_ref().map(|c| c.from.clone()),
    }
}

fn from_raw<E: serde::de::Error>(raw: &RawMatch) -> Result<Option<Correction>, E> {
    if !(0.0..=1.0).contains(&raw.score) {
        return Err(E::custom(format!("score {} outside [0, 1]", raw.score)));
    }
    match (raw.corrected, &raw.corrected_from) {
        (true, Some(from)) => Ok(Some(Correction { from: from.clone() })),
        (false, None) => Ok(None),
        (true, None) => Err(E::custom("corrected match lacks corrected_from")),
        (false, Some(_)) => Err(E::custom("corrected_from present on uncorrected match")),
    }
}

impl Serialize for ColumnMatch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_raw(
            &self.source_column,
            &self.target_attribute,
            self.score,
            self.method,
            &self.correction,
        )
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ColumnMatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawMatch::deserialize(d)?;
        let correction = from_raw(&raw)?;
        Ok(ColumnMatch {
            source_column: raw.source,
            target_attribute: raw.target,
            score: raw.score,
            method: raw.method,
            correction,
        })
    }
}

impl Serialize for ValueMatch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_raw(
            &self.source_value,
            &self.target_value,
            self.score,
            self.method,
            &self.correction,
        )
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ValueMatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawMatch::deserialize(d)?;
        let correction = from_raw(&raw)?;
        Ok(ValueMatch {
            source_value: raw.source,
            target_value: raw.target,
            score: raw.score,
            method: raw.method,
            correction,
        })
    }
}

/// One match per source column: the best-scoring attribute name, or an
/// abstention when every attribute scores exactly zero.
pub fn match_schema(
    source: &Table,
    target: &TargetSchema,
    method: MatchMethod,
) -> Result<Vec<ColumnMatch>, MatcherError> {
    if target.is_empty() {
        return Err(MatcherError::EmptySchema(target.name().to_string()));
    }
    if source.columns().is_empty() {
        return Err(MatcherError::NoColumns);
    }
    let scorer = Scorer::new(method, target.attribute_names());
    Ok(source
        .columns()
        .iter()
        .map(|col| {
            let (best, score) = scorer.best(col).expect("schema is non-empty");
            ColumnMatch {
                source_column: col.clone(),
                target_attribute: (score > 0.0).then(|| best.to_string()),
                score,
                method,
                correction: None,
            }
        })
        .collect())
}

/// The `k` best attributes for `column`, by descending score then name.
pub fn top_matches(
    source: &Table,
    column: &str,
    target: &TargetSchema,
    k: usize,
    method: MatchMethod,
) -> Result<Vec<(String, f64)>, MatcherError> {
    if k == 0 {
        return Err(MatcherError::ZeroK);
    }
    if !source.has_column(column) {
        return Err(MatcherError::UnknownColumn(column.to_string()));
    }
    let scorer = Scorer::new(method, target.attribute_names());
    Ok(scorer
        .rank(column)
        .into_iter()
        .take(k)
        .map(|(name, score)| (name.to_string(), score))
        .collect())
}

/// Matches every distinct value of each source column to the best value of
/// the paired attribute's enumerated domain. Pairs whose attribute is not
/// enumerated produce an empty table flagged `skipped`.
pub fn match_values(
    source: &Table,
    target: &TargetSchema,
    column_mapping: &[(String, String)],
    method: MatchMethod,
) -> Result<Vec<ValueMatchTable>, MatcherError> {
    let mut out = Vec::with_capacity(column_mapping.len());
    for (column, attribute) in column_mapping {
        if !source.has_column(column) {
            return Err(MatcherError::UnknownColumn(column.clone()));
        }
        let attr = target
            .attribute(attribute)
            .ok_or_else(|| MatcherError::UnknownAttribute(attribute.clone()))?;
        let mut table = ValueMatchTable {
            source_column: column.clone(),
            target_attribute: attribute.clone(),
            method,
            skipped: false,
            matches: Vec::new(),
        };
        match &attr.domain {
            Domain::Enumerated(values) => {
                let scorer = Scorer::new(method, values.iter().map(String::as_str).collect());
                for value in source.distinct_values(column)? {
                    let (best, score) = scorer.best(&value).expect("domain is non-empty");
                    table.matches.push(ValueMatch {
                        target_value: Some(best.to_string()),
                        source_value: value,
                        score,
                        method,
                        correction: None,
                    });
                }
            }
            Domain::Free | Domain::Numeric { .. } => table.skipped = true,
        }
        out.push(table);
    }
    Ok(out)
}
