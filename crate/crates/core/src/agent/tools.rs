//! Tool registry: named, schema-checked wrappers around the primitives.
//!
//! Tool names, descriptions and parameter schemas come from
//! `resources/tools.json`; this module binds each name to its implementation.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::review::{review_column_matches, review_value_matches};
use super::reviewer::Reviewer;
use super::SessionState;
use crate::mapspec::{build_spec, has_errors, serialize_spec, validate_spec, MappingSpec, OnMissing};
use crate::matchers::{match_schema, match_values, top_matches, MatchMethod};
use crate::materialize::{materialize_mapping, union_tables};
use crate::provenance::{sha256_hex, ProvenanceError, RecordKind};
use crate::table::{load_table, Table};
use crate::vocab::Domain;

pub(crate) const TOOLS_RESOURCE: &str = include_str!("../../resources/tools.json");

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("{tool}: missing required argument `{arg}`")]
    MissingArg { tool: String, arg: String },
    #[error("{tool}: unexpected argument `{arg}`")]
    UnexpectedArg { tool: String, arg: String },
    #[error("{tool}: argument `{arg}` {reason}")]
    InvalidArg { tool: String, arg: String, reason: String },
    #[error("{tool}: {message}")]
    Failed { tool: String, message: String },
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
}

pub type ToolFn = fn(&mut ToolContext<'_>, &Map<String, Value>) -> Result<Value, ToolError>;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, (ToolSpec, ToolFn)>,
}

impl ToolRegistry {
    pub fn register(&mut self, spec: ToolSpec, f: ToolFn) -> Result<(), ToolError> {
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        self.tools.insert(spec.name.clone(), (spec, f));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|(s, _)| s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values().map(|(s, _)| s)
    }

    /// Checks `args` against the tool's parameter schema.
    pub fn validate(&self, tool: &str, args: &Value) -> Result<(), ToolError> {
        let (spec, _) = self
            .tools
            .get(tool)
            .ok_or_else(|| ToolError::UnknownTool(tool.to_string()))?;
        let Value::Object(args) = args else {
            return Err(ToolError::InvalidArg {
                tool: tool.into(),
                arg: "*".into(),
                reason: "arguments must be an object".into(),
            });
        };
        let empty = Map::new();
        let props = spec.parameters["properties"].as_object().unwrap_or(&empty);
        if let Some(required) = spec.parameters["required"].as_array() {
            for r in required.iter().filter_map(Value::as_str) {
                if !args.contains_key(r) {
                    return Err(ToolError::MissingArg {
                        tool: tool.into(),
                        arg: r.into(),
                    });
                }
            }
        }
        for (key, value) in args {
            let schema = props.get(key).ok_or_else(|| ToolError::UnexpectedArg {
                tool: tool.into(),
                arg: key.clone(),
            })?;
            check_type(schema, value).map_err(|reason| ToolError::InvalidArg {
                tool: tool.into(),
                arg: key.clone(),
                reason,
            })?;
        }
        Ok(())
    }

    fn function(&self, name: &str) -> Option<ToolFn> {
        self.tools.get(name).map(|(_, f)| *f)
    }
}

fn check_type(schema: &Value, value: &Value) -> Result<(), String> {
    let ok = match schema["type"].as_str() {
        Some("string") => value.is_string(),
        Some("integer") => value.is_i64() || value.is_u64(),
        Some("number") => value.is_number(),
        Some("boolean") => value.is_boolean(),
        Some("object") => value.is_object(),
        Some("array") => {
            let Some(items) = value.as_array() else {
                return Err("must be an array".into());
            };
            for item in items {
                check_type(&schema["items"], item)?;
            }
            true
        }
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("must be of type {}", schema["type"]))
    }
}

#[derive(Deserialize)]
struct ToolsResource {
    tools: Vec<ToolSpec>,
}

const BINDINGS: &[(&str, ToolFn)] = &[
    ("load_table", tool_load_table),
    ("match_schema", tool_match_schema),
    ("top_matches", tool_top_matches),
    ("domain_of", tool_domain_of),
    ("match_values", tool_match_values),
    ("review_column_matches", tool_review_columns),
    ("review_value_matches", tool_review_values),
    ("build_spec", tool_build_spec),
    ("validate_spec", tool_validate_spec),
    ("materialize_mapping", tool_materialize),
    ("union_tables", tool_union),
    ("write_table", tool_write_table),
    ("export_spec", tool_export_spec),
];

/// The built-in registry.
pub fn register_tools() -> ToolRegistry {
    let resource: ToolsResource = serde_json::from_str(TOOLS_RESOURCE).expect("tools.json is valid");
    let mut registry = ToolRegistry::default();
    for spec in resource.tools {
        let f = BINDINGS
            .iter()
            .find(|(n, _)| *n == spec.name)
            .map(|(_, f)| *f)
            .unwrap_or_else(|| panic!("tools.json describes unbound tool `{}`", spec.name));
        registry.register(spec, f).expect("tools.json has unique names");
    }
    registry
}

/// Execution context handed to tools. Every invocation through
/// [`ToolContext::invoke`] is logged as a `tool_call`/`tool_result` pair.
pub struct ToolContext<'a> {
    pub state: &'a mut SessionState,
    registry: &'a ToolRegistry,
    reviewer: Option<&'a mut dyn Reviewer>,
    current_call: Option<u64>,
}

impl<'a> ToolContext<'a> {
    pub fn new(
        state: &'a mut SessionState,
        registry: &'a ToolRegistry,
        reviewer: Option<&'a mut dyn Reviewer>,
    ) -> Self {
        Self {
            state,
            registry,
            reviewer,
            current_call: None,
        }
    }

    /// Sequence number of the `tool_call` record currently executing.
    pub fn current_call(&self) -> Option<u64> {
        self.current_call
    }

    pub fn invoke(&mut self, tool: &str, args: Value) -> Result<Value, ToolError> {
        let call_id = self.state.next_call_id();
        let call_seq = self.state.log.append(
            RecordKind::ToolCall,
            json!({"call_id": call_id, "tool": tool, "args": args}),
            self.current_call,
        )?;
        let outcome = self.registry.validate(tool, &args).and_then(|_| {
            let f = self.registry.function(tool).expect("validated tool exists");
            let saved = self.current_call.replace(call_seq);
            let r = f(self, args.as_object().expect("validated object"));
            self.current_call = saved;
            r
        });
        if let Err(ToolError::Provenance(_)) = outcome {
            return outcome;
        }
        let payload = match &outcome {
            Ok(result) => json!({"call_id": call_id, "ok": true, "result": result}),
            Err(e) => json!({"call_id": call_id, "ok": false, "error": e.to_string()}),
        };
        self.state.log.append(RecordKind::ToolResult, payload, Some(call_seq))?;
        outcome
    }

    pub(crate) fn take_reviewer(&mut self) -> Option<&'a mut dyn Reviewer> {
        self.reviewer.take()
    }

    pub(crate) fn put_reviewer(&mut self, reviewer: &'a mut dyn Reviewer) {
        self.reviewer = Some(reviewer);
    }
}

// Argument helpers.

fn fail(tool: &str, message: impl std::fmt::Display) -> ToolError {
    ToolError::Failed {
        tool: tool.to_string(),
        message: message.to_string(),
    }
}

fn arg_str<'v>(tool: &str, args: &'v Map<String, Value>, key: &str) -> Result<&'v str, ToolError> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ToolError::MissingArg {
            tool: tool.into(),
            arg: key.into(),
        })
}

fn opt_str<'v>(args: &'v Map<String, Value>, key: &str) -> Option<&'v str> {
    args.get(key).and_then(Value::as_str)
}

fn opt_str_list(args: &Map<String, Value>, key: &str) -> Option<Vec<String>> {
    args.get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
}

fn method_arg(tool: &str, state: &SessionState, args: &Map<String, Value>) -> Result<MatchMethod, ToolError> {
    match opt_str(args, "method") {
        None => Ok(state.method),
        Some(m) => m.parse().map_err(|e| ToolError::InvalidArg {
            tool: tool.into(),
            arg: "method".into(),
            reason: format!("{e}"),
        }),
    }
}

fn table_arg<'s>(tool: &str, state: &'s SessionState, name: &str) -> Result<&'s Table, ToolError> {
    state
        .tables
        .get(name)
        .ok_or_else(|| fail(tool, format!("no table named `{name}` is loaded")))
}

fn check_target(tool: &str, state: &SessionState, args: &Map<String, Value>) -> Result<(), ToolError> {
    let target = arg_str(tool, args, "target")?;
    if target != state.schema.name() {
        return Err(fail(
            tool,
            format!(
                "unknown target schema `{target}` (session schema is `{}`)",
                state.schema.name()
            ),
        ));
    }
    Ok(())
}

fn table_summary(table: &Table) -> Value {
    json!({"table": table.name(), "columns": table.columns(), "rows": table.num_rows()})
}

pub(crate) fn spec_value(spec: &MappingSpec) -> Value {
    serde_json::from_str(&serialize_spec(spec)).expect("canonical spec is JSON")
}

// Tools.

fn tool_load_table(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "load_table";
    let path = arg_str(T, args, "path")?;
    let columns = opt_str_list(args, "columns");
    let resolved = ctx.state.resolve_input(path);
    let bytes = std::fs::read(&resolved).map_err(|e| fail(T, format!("{}: {e}", resolved.display())))?;
    let table = load_table(&resolved, columns.as_deref()).map_err(|e| fail(T, e))?;
    let name = opt_str(args, "name").unwrap_or(table.name()).to_string();
    let table = table.with_name(name.clone());
    let mut summary = table_summary(&table);
    summary["sha256"] = json!(sha256_hex(&bytes));
    let state = &mut *ctx.state;
    if state.source.as_deref() == Some(name.as_str()) {
        state.column_matches.clear();
        state.value_tables.clear();
        state.columns_reviewed = false;
        state.values_reviewed = false;
        state.invalidate_spec();
    }
    state.tables.insert(name.clone(), table);
    if state.source.is_none() {
        state.source = Some(name);
    }
    Ok(summary)
}

fn tool_match_schema(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "match_schema";
    check_target(T, ctx.state, args)?;
    let source = arg_str(T, args, "source")?;
    let method = method_arg(T, ctx.state, args)?;
    let table = table_arg(T, ctx.state, source)?;
    let matches = match_schema(table, &ctx.state.schema, method).map_err(|e| fail(T, e))?;
    let result = serde_json::to_value(&matches).expect("matches serialize");
    let state = &mut *ctx.state;
    state.source = Some(source.to_string());
    state.method = method;
    state.column_matches = matches;
    state.columns_reviewed = false;
    state.value_tables.clear();
    state.values_reviewed = false;
    state.escalations.clear();
    state.invalidate_spec();
    Ok(result)
}

fn tool_top_matches(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "top_matches";
    check_target(T, ctx.state, args)?;
    let source = arg_str(T, args, "source")?;
    let column = arg_str(T, args, "column")?;
    let k = args.get("k").and_then(Value::as_u64).unwrap_or(0) as usize;
    let method = method_arg(T, ctx.state, args)?;
    let table = table_arg(T, ctx.state, source)?;
    let ranked = top_matches(table, column, &ctx.state.schema, k, method).map_err(|e| fail(T, e))?;
    Ok(Value::Array(
        ranked
            .into_iter()
            .map(|(target, score)| json!({"target": target, "score": score}))
            .collect(),
    ))
}

fn tool_domain_of(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "domain_of";
    let attribute = arg_str(T, args, "attribute")?;
    let domain = ctx.state.schema.domain_of(attribute).map_err(|e| fail(T, e))?;
    let mut out = json!({"attribute": attribute, "kind": domain.kind()});
    match domain {
        Domain::Enumerated(values) => out["values"] = json!(values),
        Domain::Numeric { min, max } => {
            out["min"] = json!(min);
            out["max"] = json!(max);
        }
        Domain::Free => {}
    }
    Ok(out)
}

fn tool_match_values(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "match_values";
    check_target(T, ctx.state, args)?;
    let source = arg_str(T, args, "source")?;
    let method = method_arg(T, ctx.state, args)?;
    let pairs: Vec<(String, String)> = match args.get("pairs").and_then(Value::as_array) {
        Some(pairs) => pairs
            .iter()
            .map(|p| match p.as_array().map(Vec::as_slice) {
                Some([Value::String(c), Value::String(a)]) => Ok((c.clone(), a.clone())),
                _ => Err(ToolError::InvalidArg {
                    tool: T.into(),
                    arg: "pairs".into(),
                    reason: "each pair must be [column, attribute]".into(),
                }),
            })
            .collect::<Result<_, _>>()?,
        None => {
            let wanted = opt_str_list(args, "columns");
            let mut pairs = Vec::new();
            if let Some(cols) = &wanted {
                for c in cols {
                    match ctx.state.column_match(c) {
                        None => return Err(fail(T, format!("column `{c}` has no schema match"))),
                        Some(m) => {
                            if let Some(t) = &m.target_attribute {
                                pairs.push((c.clone(), t.clone()));
                            }
                        }
                    }
                }
            } else {
                for m in &ctx.state.column_matches {
                    if let Some(t) = &m.target_attribute {
                        pairs.push((m.source_column.clone(), t.clone()));
                    }
                }
            }
            pairs
        }
    };
    let table = table_arg(T, ctx.state, source)?;
    let tables = match_values(table, &ctx.state.schema, &pairs, method).map_err(|e| fail(T, e))?;
    let result = serde_json::to_value(&tables).expect("value tables serialize");
    let state = &mut *ctx.state;
    for t in tables {
        match state
            .value_tables
            .iter_mut()
            .find(|x| x.source_column == t.source_column)
        {
            Some(existing) => *existing = t,
            None => state.value_tables.push(t),
        }
    }
    state.values_reviewed = false;
    state.invalidate_spec();
    Ok(result)
}

fn tool_review_columns(ctx: &mut ToolContext<'_>, _args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "review_column_matches";
    let reviewer = ctx.take_reviewer().ok_or_else(|| fail(T, "no reviewer configured"))?;
    let result = review_column_matches(ctx, &mut *reviewer);
    ctx.put_reviewer(reviewer);
    let decisions = result?;
    ctx.state.columns_reviewed = true;
    Ok(json!({"decisions": decisions.len(), "escalated": ctx.state.escalations.len()}))
}

fn tool_review_values(ctx: &mut ToolContext<'_>, _args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "review_value_matches";
    let reviewer = ctx.take_reviewer().ok_or_else(|| fail(T, "no reviewer configured"))?;
    let result = review_value_matches(ctx, &mut *reviewer);
    ctx.put_reviewer(reviewer);
    let decisions = result?;
    ctx.state.values_reviewed = true;
    Ok(json!({"decisions": decisions.len(), "escalated": ctx.state.escalations.len()}))
}

fn tool_build_spec(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "build_spec";
    let on_missing: OnMissing = match opt_str(args, "on_missing") {
        None => OnMissing::Keep,
        Some(s) => s.parse().map_err(|e: String| ToolError::InvalidArg {
            tool: T.into(),
            arg: "on_missing".into(),
            reason: e,
        })?,
    };
    if ctx.state.column_matches.is_empty() {
        return Err(fail(T, "no column matches to compile"));
    }
    let built = build_spec(&ctx.state.column_matches, &ctx.state.value_tables).map_err(|e| fail(T, e))?;
    let spec = MappingSpec::new(built.entries().to_vec(), on_missing).map_err(|e| fail(T, e))?;
    let value = spec_value(&spec);
    ctx.state.invalidate_spec();
    ctx.state.spec = Some(spec);
    Ok(value)
}

fn tool_validate_spec(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "validate_spec";
    let source = opt_str(args, "source")
        .map(str::to_string)
        .or_else(|| ctx.state.source.clone())
        .ok_or_else(|| fail(T, "no source table"))?;
    let spec = ctx
        .state
        .spec
        .as_ref()
        .ok_or_else(|| fail(T, "no mapping spec built"))?;
    let table = table_arg(T, ctx.state, &source)?;
    let diagnostics = validate_spec(spec, table, &ctx.state.schema);
    let approved = !has_errors(&diagnostics);
    let result = json!({"diagnostics": diagnostics, "approved": approved});
    ctx.state.diagnostics = Some(diagnostics);
    ctx.state.spec_approved = approved;
    Ok(result)
}

fn tool_materialize(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "materialize_mapping";
    let source = arg_str(T, args, "source")?;
    let output = opt_str(args, "output")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{source}_harmonized"));
    let spec = ctx
        .state
        .spec
        .as_ref()
        .ok_or_else(|| fail(T, "no mapping spec built"))?;
    if !ctx.state.spec_approved {
        return Err(fail(T, "mapping spec has not passed validation"));
    }
    let table = table_arg(T, ctx.state, source)?;
    let out = materialize_mapping(table, spec)
        .map_err(|e| fail(T, e))?
        .with_name(output.clone());
    let summary = table_summary(&out);
    ctx.state.tables.insert(output.clone(), out);
    ctx.state.materialized = Some(output);
    Ok(summary)
}

fn tool_union(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "union_tables";
    let parts = opt_str_list(args, "parts").unwrap_or_default();
    let output = arg_str(T, args, "output")?.to_string();
    let tables = parts
        .iter()
        .map(|p| table_arg(T, ctx.state, p).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    let out = union_tables(&tables).with_name(output.clone());
    let summary = table_summary(&out);
    ctx.state.tables.insert(output, out);
    Ok(summary)
}

fn tool_write_table(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "write_table";
    let name = arg_str(T, args, "table")?;
    let path = arg_str(T, args, "path")?;
    let text = table_arg(T, ctx.state, name)?.to_csv_string();
    let target = ctx.state.resolve_output(path);
    std::fs::write(&target, &text).map_err(|e| fail(T, format!("{}: {e}", target.display())))?;
    let sha = sha256_hex(text.as_bytes());
    ctx.state.artifacts.insert(path.to_string(), sha.clone());
    let parent = ctx.current_call();
    ctx.state.log.append(
        RecordKind::Artifact,
        json!({"kind": "table", "table": name, "path": path, "sha256": sha}),
        parent,
    )?;
    Ok(json!({"path": path, "sha256": sha, "bytes": text.len()}))
}

fn tool_export_spec(ctx: &mut ToolContext<'_>, args: &Map<String, Value>) -> Result<Value, ToolError> {
    const T: &str = "export_spec";
    let path = arg_str(T, args, "path")?;
    let spec = ctx
        .state
        .spec
        .as_ref()
        .ok_or_else(|| fail(T, "no mapping spec built"))?;
    let text = serialize_spec(spec) + "\n";
    let value = spec_value(spec);
    let target = ctx.state.resolve_output(path);
    std::fs::write(&target, &text).map_err(|e| fail(T, format!("{}: {e}", target.display())))?;
    let sha = sha256_hex(text.as_bytes());
    ctx.state.artifacts.insert(path.to_string(), sha.clone());
    let parent = ctx.current_call();
    ctx.state.log.append(
        RecordKind::Artifact,
        json!({"kind": "spec", "path": path, "sha256": sha, "spec": value}),
        parent,
    )?;
    Ok(json!({"path": path, "sha256": sha}))
}
