//! Lineage of one (target attribute, target value) pair.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::{ProvenanceRecord, RecordKind};

/// Records that led to `attribute = value`: for every source value finally
/// mapped there, the `match_values` call that matched it and each reviewer
/// decision, question, answer and user decision about it. Sorted by `seq`;
/// empty when no source value ends up mapped to the pair.
pub fn trace_value(records: &[ProvenanceRecord], attribute: &str, value: &str) -> Vec<ProvenanceRecord> {
    // Final target of every (column, source value) under `attribute`, in log
    // order: matcher results first, then decisions that changed them.
    let mut current: BTreeMap<(String, String), Option<String>> = BTreeMap::new();
    for r in records {
        match r.kind {
            RecordKind::ToolResult if is_match_values_result(records, r) => {
                for table in r.payload["result"].as_array().into_iter().flatten() {
                    if table["target_attribute"].as_str() != Some(attribute) {
                        continue;
                    }
                    let column = table["source_column"].as_str().unwrap_or_default();
                    current.retain(|(c, _), _| c != column);
                    for m in table["matches"].as_array().into_iter().flatten() {
                        let source = m["source"].as_str().unwrap_or_default().to_string();
                        current.insert((column.to_string(), source), m["target"].as_str().map(str::to_string));
                    }
                }
            }
            RecordKind::ReviewerDecision | RecordKind::UserDecision => {
                if let (Some(c), Some(v)) = (
                    r.payload["subject"]["column"].as_str(),
                    r.payload["subject"]["value"].as_str(),
                ) {
                    let key = (c.to_string(), v.to_string());
                    if let Some(slot) = current.get_mut(&key) {
                        *slot = r.payload["after"]["target"].as_str().map(str::to_string);
                    }
                }
            }
            _ => {}
        }
    }
    let subjects: BTreeSet<(String, String)> = current
        .into_iter()
        .filter(|(_, t)| t.as_deref() == Some(value))
        .map(|(k, _)| k)
        .collect();
    if subjects.is_empty() {
        return Vec::new();
    }
    let mut match_calls: BTreeSet<u64> = BTreeSet::new();

    for r in records {
        if r.kind == RecordKind::ToolResult && is_match_values_result(records, r) {
            let produced = r.payload["result"].as_array().into_iter().flatten().any(|table| {
                let column = table["source_column"].as_str().unwrap_or_default();
                table["target_attribute"].as_str() == Some(attribute)
                    && table["matches"].as_array().into_iter().flatten().any(|m| {
                        subjects.contains(&(column.to_string(), m["source"].as_str().unwrap_or_default().to_string()))
                    })
            });
            if produced {
                match_calls.extend(r.parent_seq);
            }
        }
    }

    let question_ids: BTreeSet<String> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Question && about(&r.payload["subject"], &subjects))
        .filter_map(|r| r.payload["id"].as_str().map(str::to_string))
        .collect();

    let mut out: Vec<ProvenanceRecord> = records
        .iter()
        .filter(|r| match r.kind {
            RecordKind::ToolCall => match_calls.contains(&r.seq),
            RecordKind::ReviewerDecision | RecordKind::UserDecision | RecordKind::Question => {
                about(&r.payload["subject"], &subjects)
            }
            RecordKind::Answer => r.payload["question_id"]
                .as_str()
                .is_some_and(|q| question_ids.contains(q)),
            _ => false,
        })
        .cloned()
        .collect();
    out.sort_by_key(|r| r.seq);
    out
}

fn is_match_values_result(records: &[ProvenanceRecord], r: &ProvenanceRecord) -> bool {
    r.kind == RecordKind::ToolResult
        && r.payload["ok"].as_bool() == Some(true)
        && r.parent_seq
            .and_then(|p| records.get(p as usize))
            .is_some_and(|call| call.kind == RecordKind::ToolCall && call.payload["tool"] == "match_values")
}

fn about(subject: &Value, subjects: &BTreeSet<(String, String)>) -> bool {
    match (subject["column"].as_str(), subject["value"].as_str()) {
        (Some(c), Some(v)) => subjects.contains(&(c.to_string(), v.to_string())),
        _ => false,
    }
}
