//! Declarative mapping specifications.
//!
//! The JSON form is a bare array of entries, or a wrapper object
//! `{"entries": [...], "on_missing": "..."}` when the policy is not the
//! default. An entry with `matches` is a value dictionary, `constant` writes a
//! fixed value, `"drop": true` discards the column, and anything else is a
//! plain rename.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::matchers::{ColumnMatch, ValueMatchTable};
use crate::table::Table;
use crate::vocab::{Domain, TargetSchema};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("expected an array of entries or an object with `entries`")]
    BadShape,
    #[error("entry {index}: {reason}")]
    Entry { index: usize, reason: String },
    #[error("entry {index}: duplicate source column `{source_column}`")]
    DuplicateSource { index: usize, source_column: String },
    #[error("entry {index}: duplicate target attribute `{target}`")]
    DuplicateTarget { index: usize, target: String },
    #[error("entry {index}: duplicate source value `{value}` in matches")]
    DuplicateValue { index: usize, value: String },
    #[error("value table for `{source_column}` -> `{target}` has no matching column match")]
    UnmatchedValueTable { source_column: String, target: String },
}

/// What to do with a non-null value a dictionary does not cover.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OnMissing {
    #[default]
    Keep,
    Null,
    Error,
}

impl OnMissing {
    pub fn as_str(self) -> &'static str {
        match self {
            OnMissing::Keep => "keep",
            OnMissing::Null => "null",
            OnMissing::Error => "error",
        }
    }
}

impl std::str::FromStr for OnMissing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "keep" => Ok(OnMissing::Keep),
            "null" => Ok(OnMissing::Null),
            "error" => Ok(OnMissing::Error),
            other => Err(format!("unknown on_missing policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transform {
    Dictionary(Vec<(String, String)>),
    Rename,
    Constant(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryAction {
    Map { target: String, transform: Transform },
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub source: String,
    pub action: EntryAction,
}

impl MappingEntry {
    pub fn dictionary(source: impl Into<String>, target: impl Into<String>, matches: Vec<(String, String)>) -> Self {
        Self::map(source, target, Transform::Dictionary(matches))
    }

    pub fn rename(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self::map(source, target, Transform::Rename)
    }

    pub fn constant(source: impl Into<String>, target: impl Into<String>, value: impl Into<String>) -> Self {
        Self::map(source, target, Transform::Constant(value.into()))
    }

    pub fn drop(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            action: EntryAction::Drop,
        }
    }

    fn map(source: impl Into<String>, target: impl Into<String>, transform: Transform) -> Self {
        Self {
            source: source.into(),
            action: EntryAction::Map {
                target: target.into(),
                transform,
            },
        }
    }

    pub fn target(&self) -> Option<&str> {
        match &self.action {
            EntryAction::Map { target, .. } => Some(target),
            EntryAction::Drop => None,
        }
    }

    pub fn transform(&self) -> Option<&Transform> {
        match &self.action {
            EntryAction::Map { transform, .. } => Some(transform),
            EntryAction::Drop => None,
        }
    }
}

/// An ordered, validated list of mapping entries plus the missing-value policy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MappingSpec {
    entries: Vec<MappingEntry>,
    on_missing: OnMissing,
}

impl MappingSpec {
    pub fn new(entries: Vec<MappingEntry>, on_missing: OnMissing) -> Result<Self, SpecError> {
        let mut sources = HashSet::new();
        let mut targets = HashSet::new();
        for (index, e) in entries.iter().enumerate() {
            if !sources.insert(e.source.as_str()) {
                return Err(SpecError::DuplicateSource {
                    index,
                    source_column: e.source.clone(),
                });
            }
            if let Some(t) = e.target() {
                if !targets.insert(t) {
                    return Err(SpecError::DuplicateTarget {
                        index,
                        target: t.to_string(),
                    });
                }
            }
            if let Some(Transform::Dictionary(pairs)) = e.transform() {
                let mut seen = HashSet::new();
                for (src, _) in pairs {
                    if !seen.insert(src.as_str()) {
                        return Err(SpecError::DuplicateValue {
                            index,
                            value: src.clone(),
                        });
                    }
                }
            }
        }
        Ok(Self { entries, on_missing })
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn on_missing(&self) -> OnMissing {
        self.on_missing
    }

    pub fn entry_for_target(&self, target: &str) -> Option<&MappingEntry> {
        self.entries.iter().find(|e| e.target() == Some(target))
    }
}

/// Parses the JSON spec format.
pub fn parse_spec(text: &str) -> Result<MappingSpec, SpecError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SpecError::Json(e.to_string()))?;
    let (items, on_missing) = match value {
        Value::Array(items) => (items, OnMissing::Keep),
        Value::Object(mut obj) => {
            let entries = match obj.remove("entries") {
                Some(Value::Array(items)) => items,
                _ => return Err(SpecError::BadShape),
            };
            let on_missing = match obj.remove("on_missing") {
                None => OnMissing::Keep,
                Some(Value::String(s)) => s.parse().map_err(SpecError::Json)?,
                Some(_) => return Err(SpecError::Json("`on_missing` must be a string".into())),
            };
            if let Some(key) = obj.keys().next() {
                return Err(SpecError::Json(format!("unknown top-level key `{key}`")));
            }
            (entries, on_missing)
        }
        _ => return Err(SpecError::BadShape),
    };
    let entries = items
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_entry(i, v))
        .collect::<Result<Vec<_>, _>>()?;
    MappingSpec::new(entries, on_missing)
}

fn parse_entry(index: usize, value: Value) -> Result<MappingEntry, SpecError> {
    let err = |reason: String| SpecError::Entry { index, reason };
    let Value::Object(mut obj) = value else {
        return Err(err("entry must be an object".into()));
    };
    let take_str = |obj: &mut Map<String, Value>, key: &str| -> Result<Option<String>, SpecError> {
        match obj.remove(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(err(format!("`{key}` must be a string"))),
        }
    };
    let source = take_str(&mut obj, "source")?.ok_or_else(|| err("missing `source`".into()))?;
    let target = take_str(&mut obj, "target")?;
    let constant = take_str(&mut obj, "constant")?;
    let matches = obj.remove("matches");
    let drop = obj.remove("drop");
    if let Some(key) = obj.keys().next() {
        return Err(err(format!("unknown key `{key}`")));
    }
    let kinds = [matches.is_some(), constant.is_some(), drop.is_some()]
        .iter()
        .filter(|x| **x)
        .count();
    if kinds > 1 {
        return Err(err("at most one of `matches`, `constant`, `drop` is allowed".into()));
    }
    if let Some(d) = drop {
        if d != Value::Bool(true) {
            return Err(err("`drop` must be true".into()));
        }
        if target.is_some() {
            return Err(err("drop entries take no `target`".into()));
        }
        return Ok(MappingEntry::drop(source));
    }
    let target = target.ok_or_else(|| err("missing `target`".into()))?;
    let transform = if let Some(m) = matches {
        let Value::Array(pairs) = m else {
            return Err(err("`matches` must be an array".into()));
        };
        let pairs = pairs
            .into_iter()
            .map(|p| match p {
                Value::Array(mut pair) if pair.len() == 2 => match (pair.remove(0), pair.remove(0)) {
                    (Value::String(a), Value::String(b)) => Ok((a, b)),
                    _ => Err(err("match pairs must hold two strings".into())),
                },
                _ => Err(err("each match must be a 2-element array".into())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Transform::Dictionary(pairs)
    } else if let Some(c) = constant {
        Transform::Constant(c)
    } else {
        Transform::Rename
    };
    Ok(MappingEntry {
        source,
        action: EntryAction::Map { target, transform },
    })
}

#[derive(Serialize)]
struct EntryOut<'a> {
    source: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matches: Option<&'a [(String, String)]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    constant: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drop: Option<bool>,
}

#[derive(Serialize)]
struct WrapperOut<'a> {
    entries: Vec<EntryOut<'a>>,
    on_missing: OnMissing,
}

/// Canonical JSON: entries in order, keys `source, target, matches|constant|drop`,
/// two-space indentation, no trailing newline.
pub fn serialize_spec(spec: &MappingSpec) -> String {
    let entries: Vec<EntryOut> = spec
        .entries
        .iter()
        .map(|e| {
            let mut out = EntryOut {
                source: &e.source,
                target: e.target(),
                matches: None,
                constant: None,
                drop: None,
            };
            match e.transform() {
                Some(Transform::Dictionary(pairs)) => out.matches = Some(pairs),
                Some(Transform::Constant(c)) => out.constant = Some(c),
                Some(Transform::Rename) => {}
                None => out.drop = Some(true),
            }
            out
        })
        .collect();
    let json = if spec.on_missing == OnMissing::Keep {
        serde_json::to_string_pretty(&entries)
    } else {
        serde_json::to_string_pretty(&WrapperOut {
            entries,
            on_missing: spec.on_missing,
        })
    };
    json.expect("spec serializes")
}

/// Compiles reviewed matches into a spec. Each non-abstaining column becomes
/// a dictionary entry when a value table exists for its pair and a rename
/// otherwise; abstentions become drops.
pub fn build_spec(column_matches: &[ColumnMatch], value_tables: &[ValueMatchTable]) -> Result<MappingSpec, SpecError> {
    for vt in value_tables {
        let paired = column_matches.iter().any(|m| {
            m.source_column == vt.source_column && m.target_attribute.as_deref() == Some(vt.target_attribute.as_str())
        });
        if !paired {
            return Err(SpecError::UnmatchedValueTable {
                source_column: vt.source_column.clone(),
                target: vt.target_attribute.clone(),
            });
        }
    }
    let entries = column_matches
        .iter()
        .map(|m| match &m.target_attribute {
            None => MappingEntry::drop(&m.source_column),
            Some(target) => {
                let table = value_tables
                    .iter()
                    .find(|vt| !vt.skipped && vt.source_column == m.source_column && &vt.target_attribute == target);
                match table {
                    Some(vt) => MappingEntry::dictionary(
                        &m.source_column,
                        target,
                        vt.matches
                            .iter()
                            .filter_map(|v| v.target_value.as_ref().map(|t| (v.source_value.clone(), t.clone())))
                            .collect(),
                    ),
                    None => MappingEntry::rename(&m.source_column, target),
                }
            }
        })
        .collect();
    MappingSpec::new(entries, OnMissing::Keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    MissingSourceColumn,
    MissingTargetAttribute,
    DomainViolation,
    UnmappedValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub entry: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev}: entry {}: {}", self.entry, self.message)
    }
}

pub fn has_errors(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().any(|d| d.severity == Severity::Error)
}

/// Checks a spec against a source table and target schema. An empty result
/// means the spec is clean.
pub fn validate_spec(spec: &MappingSpec, source: &Table, target: &TargetSchema) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (index, entry) in spec.entries.iter().enumerate() {
        let mut push = |severity, kind, message: String| {
            out.push(Diagnostic {
                severity,
                kind,
                entry: index,
                message,
            })
        };
        let has_source = source.has_column(&entry.source);
        if !has_source {
            let severity = if entry.target().is_some() {
                Severity::Error
            } else {
                Severity::Warning
            };
            push(
                severity,
                DiagnosticKind::MissingSourceColumn,
                format!("source column `{}` not in table `{}`", entry.source, source.name()),
            );
        }
        let EntryAction::Map {
            target: attr_name,
            transform,
        } = &entry.action
        else {
            continue;
        };
        let Some(attr) = target.attribute(attr_name) else {
            push(
                Severity::Error,
                DiagnosticKind::MissingTargetAttribute,
                format!("target attribute `{attr_name}` not in schema `{}`", target.name()),
            );
            continue;
        };
        match transform {
            Transform::Dictionary(pairs) => {
                if let Domain::Enumerated(values) = &attr.domain {
                    for (src, tgt) in pairs {
                        if !values.contains(tgt) {
                            push(
                                Severity::Error,
                                DiagnosticKind::DomainViolation,
                                format!("`{src}` maps to `{tgt}`, which is not a permissible value of `{attr_name}`"),
                            );
                        }
                    }
                }
                if has_source {
                    let covered: BTreeSet<&str> = pairs.iter().map(|(s, _)| s.as_str()).collect();
                    let severity = match spec.on_missing {
                        OnMissing::Error => Severity::Error,
                        OnMissing::Keep | OnMissing::Null => Severity::Warning,
                    };
                    for value in source.distinct_values(&entry.source).unwrap_or_default() {
                        if !covered.contains(value.as_str()) {
                            push(
                                severity,
                                DiagnosticKind::UnmappedValue,
                                format!(
                                    "value `{value}` of column `{}` is not covered (on_missing={})",
                                    entry.source,
                                    spec.on_missing.as_str()
                                ),
                            );
                        }
                    }
                }
            }
            Transform::Constant(c) => {
                if !attr.domain.admits(c) {
                    push(
                        Severity::Error,
                        DiagnosticKind::DomainViolation,
                        format!("constant `{c}` is not a permissible value of `{attr_name}`"),
                    );
                }
            }
            Transform::Rename => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matchers::{MatchMethod, ValueMatch};
    use crate::vocab::TargetAttribute;

    const GRADE_SPEC: &str = r#"[{"source":"Histologic_Grade_FIGO","target":"tumor_grade","matches":[["FIGO grade 1","G1"],["FIGO grade 2","G2"],["FIGO grade 3","G3"]]}]"#;

    fn grade_entry() -> MappingEntry {
        MappingEntry::dictionary(
            "Histologic_Grade_FIGO",
            "tumor_grade",
            (1..=3).map(|i| (format!("FIGO grade {i}"), format!("G{i}"))).collect(),
        )
    }

    #[test]
    fn parses_dictionary_snippet() {
        let spec = parse_spec(GRADE_SPEC).unwrap();
        assert_eq!(spec.entries(), [grade_entry()]);
        assert_eq!(spec.on_missing(), OnMissing::Keep);
    }

    #[test]
    fn empty_spec() {
        let spec = parse_spec("[]").unwrap();
        assert!(spec.entries().is_empty());
        assert_eq!(serialize_spec(&spec), "[]");
    }

    #[test]
    fn duplicate_source_names_index() {
        let err = parse_spec(r#"[{"source":"Age","target":"a"},{"source":"Age","target":"b"}]"#).unwrap_err();
        assert_eq!(
            err,
            SpecError::DuplicateSource {
                index: 1,
                source_column: "Age".into()
            }
        );
    }

    #[test]
    fn duplicate_target_and_values() {
        let err = parse_spec(r#"[{"source":"A","target":"a"},{"source":"B","target":"a"}]"#).unwrap_err();
        assert!(matches!(err, SpecError::DuplicateTarget { index: 1, .. }));
        let err = parse_spec(r#"[{"source":"A","target":"a","matches":[["x","1"],["x","2"]]}]"#).unwrap_err();
        assert!(matches!(err, SpecError::DuplicateValue { index: 0, .. }));
        // two drops never collide on target
        parse_spec(r#"[{"source":"A","drop":true},{"source":"B","drop":true}]"#).unwrap();
    }

    #[test]
    fn unknown_and_conflicting_keys() {
        let err = parse_spec(r#"[{"source":"A","target":"a","lambda":"x+1"}]"#).unwrap_err();
        assert_eq!(err.to_string(), "entry 0: unknown key `lambda`");
        assert!(parse_spec(r#"[{"source":"A","target":"a","constant":"x","matches":[]}]"#).is_err());
        assert!(parse_spec(r#"[{"source":"A","target":"a","drop":true}]"#).is_err());
        assert!(parse_spec(r#"[{"source":"A","drop":false}]"#).is_err());
        assert!(parse_spec(r#"[{"source":"A","target":"a","matches":[["x"]]}]"#).is_err());
        assert!(parse_spec(r#"{"entries":[],"extra":1}"#).is_err());
        assert!(parse_spec(r#"{"entries":[],"on_missing":"ignore"}"#).is_err());
        assert!(parse_spec("42").is_err());
    }

    #[test]
    fn canonical_form_is_idempotent() {
        let once = serialize_spec(&parse_spec(GRADE_SPEC).unwrap());
        let twice = serialize_spec(&parse_spec(&once).unwrap());
        assert_eq!(once, twice);
        assert!(once.starts_with(
            "[\n  {\n    \"source\": \"Histologic_Grade_FIGO\",\n    \"target\": \"tumor_grade\",\n    \"matches\": ["
        ));
    }

    #[test]
    fn wrapper_for_non_default_policy() {
        let spec = MappingSpec::new(
            vec![
                MappingEntry::constant("Country", "project", "CPTAC"),
                MappingEntry::drop("BMI"),
                MappingEntry::rename("Age", "age_at_diagnosis"),
            ],
            OnMissing::Null,
        )
        .unwrap();
        let text = serialize_spec(&spec);
        assert!(text.starts_with("{\n  \"entries\": ["));
        assert!(text.ends_with("\"on_missing\": \"null\"\n}"));
        assert_eq!(parse_spec(&text).unwrap(), spec);
    }

    fn column(source: &str, target: Option<&str>) -> ColumnMatch {
        ColumnMatch {
            source_column: source.into(),
            target_attribute: target.map(str::to_string),
            score: 1.0,
            method: MatchMethod::default(),
            correction: None,
        }
    }

    fn grade_table() -> ValueMatchTable {
        ValueMatchTable {
            source_column: "Histologic_Grade_FIGO".into(),
            target_attribute: "tumor_grade".into(),
            method: MatchMethod::default(),
            skipped: false,
            matches: (1..=3)
                .map(|i| ValueMatch {
                    source_value: format!("FIGO grade {i}"),
                    target_value: Some(format!("G{i}")),
                    score: 0.0,
                    method: MatchMethod::default(),
                    correction: None,
                })
                .collect(),
        }
    }

    #[test]
    fn build_produces_dictionary_rename_and_drop() {
        let matches = vec![
            column("Histologic_Grade_FIGO", Some("tumor_grade")),
            column("Age", Some("age_at_diagnosis")),
            column("Zzz", None),
        ];
        let spec = build_spec(&matches, &[grade_table()]).unwrap();
        assert_eq!(
            spec.entries(),
            [
                grade_entry(),
                MappingEntry::rename("Age", "age_at_diagnosis"),
                MappingEntry::drop("Zzz")
            ]
        );
    }

    #[test]
    fn build_rejects_unmatched_value_table() {
        let matches = vec![column("Histologic_Grade_FIGO", Some("figo_stage"))];
        assert!(matches!(
            build_spec(&matches, &[grade_table()]),
            Err(SpecError::UnmatchedValueTable { .. })
        ));
    }

    fn grade_schema() -> TargetSchema {
        TargetSchema::new(
            "gdc",
            vec![TargetAttribute {
                name: "tumor_grade".into(),
                description: String::new(),
                domain: Domain::Enumerated(["G1", "G2", "G3", "Unknown"].map(String::from).to_vec()),
            }],
        )
        .unwrap()
    }

    fn grade_source(values: &[&str]) -> Table {
        Table::new(
            "dou",
            vec!["Histologic_Grade_FIGO".into()],
            values.iter().map(|v| vec![Some(v.to_string())]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn validation_diagnostics() {
        let schema = grade_schema();
        let src = grade_source(&["FIGO grade 1", "FIGO grade 3"]);
        assert!(validate_spec(&parse_spec(GRADE_SPEC).unwrap(), &src, &schema).is_empty());

        let bad = MappingSpec::new(
            vec![MappingEntry::dictionary(
                "Histologic_Grade_FIGO",
                "tumor_grade",
                vec![("FIGO grade 1".into(), "G9".into())],
            )],
            OnMissing::Keep,
        )
        .unwrap();
        let diags = validate_spec(&bad, &src, &schema);
        assert!(diags
            .iter()
            .any(|d| d.kind == DiagnosticKind::DomainViolation && d.severity == Severity::Error));

        let missing = MappingSpec::new(vec![MappingEntry::rename("Nope", "absent")], OnMissing::Keep).unwrap();
        let kinds: Vec<_> = validate_spec(&missing, &src, &schema)
            .into_iter()
            .map(|d| d.kind)
            .collect();
        assert_eq!(
            kinds,
            [
                DiagnosticKind::MissingSourceColumn,
                DiagnosticKind::MissingTargetAttribute
            ]
        );
    }

    #[test]
    fn uncovered_na_severity_follows_policy() {
        let schema = grade_schema();
        let src = grade_source(&["FIGO grade 1", "NA"]);
        let entries = parse_spec(GRADE_SPEC).unwrap().entries().to_vec();
        let strict = MappingSpec::new(entries.clone(), OnMissing::Error).unwrap();
        let diags = validate_spec(&strict, &src, &schema);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::UnmappedValue);
        assert_eq!(diags[0].severity, Severity::Error);
        assert!(diags[0].message.contains("`NA`"));
        let lenient = MappingSpec::new(entries, OnMissing::Keep).unwrap();
        assert!(!has_errors(&validate_spec(&lenient, &src, &schema)));
    }
}
