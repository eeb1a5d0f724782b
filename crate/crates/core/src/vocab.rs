//! Target schemas: attributes with descriptions and permissible-value domains.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{read_file, TableError};

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("invalid vocabulary JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate attribute name `{0}`")]
    DuplicateAttribute(String),
    #[error("attribute `{attribute}`: {reason}")]
    InvalidAttribute { attribute: String, reason: String },
    #[error("attribute `{0}` not found")]
    UnknownAttribute(String),
}

/// Permissible values for one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Domain {
    Enumerated(Vec<String>),
    Free,
    Numeric { min: Option<String>, max: Option<String> },
}

impl Domain {
    pub fn values(&self) -> Option<&[String]> {
        match self {
            Domain::Enumerated(v) => Some(v),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Domain::Enumerated(_) => "enum",
            Domain::Free => "free",
            Domain::Numeric { .. } => "numeric",
        }
    }

    pub fn admits(&self, value: &str) -> bool {
        match self {
            Domain::Enumerated(v) => v.iter().any(|x| x == value),
            Domain::Free => true,
            Domain::Numeric { min, max } => {
                let Ok(x) = value.trim().parse::<f64>() else {
                    return false;
                };
                let lo = min.as_deref().and_then(|m| m.parse::<f64>().ok());
                let hi = max.as_deref().and_then(|m| m.parse::<f64>().ok());
                lo.is_none_or(|lo| x >= lo) && hi.is_none_or(|hi| x <= hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAttribute {
    pub name: String,
    pub description: String,
    pub domain: Domain,
}

/// A validated target schema; attribute names are unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSchema {
    name: String,
    attributes: Vec<TargetAttribute>,
}

impl TargetSchema {
    pub fn new(name: impl Into<String>, attributes: Vec<TargetAttribute>) -> Result<Self, VocabError> {
        let mut seen = HashSet::new();
        for attr in &attributes {
            if !seen.insert(attr.name.as_str()) {
                return Err(VocabError::DuplicateAttribute(attr.name.clone()));
            }
            validate_domain(&attr.name, &attr.domain)?;
        }
        Ok(Self {
            name: name.into(),
            attributes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attributes(&self) -> &[TargetAttribute] {
        &self.attributes
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn attribute(&self, name: &str) -> Option<&TargetAttribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn domain_of(&self, name: &str) -> Result<&Domain, VocabError> {
        self.attribute(name)
            .map(|a| &a.domain)
            .ok_or_else(|| VocabError::UnknownAttribute(name.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, VocabError> {
        let raw: RawSchema = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawSchema::from(self);
        serde_json::to_string_pretty(&raw).expect("schema serializes")
    }
}

fn validate_domain(attr: &str, domain: &Domain) -> Result<(), VocabError> {
    let invalid = |reason: String| VocabError::InvalidAttribute {
        attribute: attr.to_string(),
        reason,
    };
    match domain {
        Domain::Enumerated(values) => {
            if values.is_empty() {
                return Err(invalid("enumerated domain is empty".into()));
            }
            let mut seen = HashSet::new();
            for v in values {
                if !seen.insert(v.as_str()) {
                    return Err(invalid(format!("duplicate domain value `{v}`")));
                }
            }
        }
        Domain::Numeric { min, max } => {
            for bound in [min, max].into_iter().flatten() {
                if bound.trim().parse::<f64>().is_err() {
                    return Err(invalid(format!("numeric bound `{bound}` is not a decimal")));
                }
            }
        }
        Domain::Free => {}
    }
    Ok(())
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<TargetSchema, VocabError> {
    let path = path.as_ref();
    let bytes = read_file(path).map_err(|e| match e {
        TableError::NotFound(p) => VocabError::NotFound(p),
        other => VocabError::Io(other.to_string()),
    })?;
    let text = String::from_utf8(bytes).map_err(|e| VocabError::Io(e.to_string()))?;
    TargetSchema::from_json_str(&text)
}

// Wire format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    name: String,
    attributes: Vec<RawAttribute>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttribute {
    name: String,
    description: String,
    domain: RawDomain,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "bound")]
    min: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "bound")]
    max: Option<String>,
}

/// Numeric bounds may be written as JSON numbers or decimal strings.
fn bound<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    match Option::<serde_json::Value>::deserialize(d)? {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s)),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(serde::de::Error::custom(format!("bound must be a number, got {other}"))),
    }
}

impl TryFrom<RawSchema> for TargetSchema {
    type Error = VocabError;

    fn try_from(raw: RawSchema) -> Result<Self, VocabError> {
        let mut attributes = Vec::with_capacity(raw.attributes.len());
        for a in raw.attributes {
            let invalid = |reason: &str| VocabError::InvalidAttribute {
                attribute: a.name.clone(),
                reason: reason.to_string(),
            };
            let d = a.domain;
            let domain = match d.kind.as_str() {
                "enum" => {
                    if d.min.is_some() || d.max.is_some() {
                        return Err(invalid("enum domain takes no min/max"));
                    }
                    Domain::Enumerated(d.values.ok_or_else(|| invalid("enum domain needs `values`"))?)
                }
                "free" => {
                    if d.values.is_some() || d.min.is_some() || d.max.is_some() {
                        return Err(invalid("free domain takes no values or bounds"));
                    }
                    Domain::Free
                }
                "numeric" => {
                    if d.values.is_some() {
                        return Err(invalid("numeric domain takes no values"));
                    }
                    Domain::Numeric { min: d.min, max: d.max }
                }
                other => return Err(invalid(&format!("unknown domain kind `{other}`"))),
            };
            attributes.push(TargetAttribute {
                name: a.name,
                description: a.description,
                domain,
            });
        }
        TargetSchema::new(raw.name, attributes)
    }
}

impl From<&TargetSchema> for RawSchema {
    fn from(s: &TargetSchema) -> Self {
        RawSchema {
            name: s.name.clone(),
            attributes: s
                .attributes
                .iter()
                .map(|a| RawAttribute {
                    name: a.name.clone(),
                    description: a.description.clone(),
                    domain: match &a.domain {
                        Domain::Enumerated(v) => RawDomain {
                            kind: "enum".into(),
                            values: Some(v.clone()),
                            min: None,
                            max: None,
                        },
                        Domain::Free => RawDomain {
                            kind: "free".into(),
                            values: None,
                            min: None,
                            max: None,
                        },
                        Domain::Numeric { min, max } => RawDomain {
                            kind: "numeric".into(),
                            values: None,
                            min: min.clone(),
                            max: max.clone(),
                        },
                    },
                })
                .collect(),
        }
    }
}
