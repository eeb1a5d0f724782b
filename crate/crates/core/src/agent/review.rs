//! Review passes over column and value matches.
//!
//! The reviewer first flags suspicious matches. For each suspect the agent
//! fetches alternatives through logged tool calls (`top_matches` for columns,
//! `domain_of` for values), then asks the reviewer to replace or escalate.
//! Replacements outside the permissible set become escalations.

use serde_json::{json, Value};

use super::reviewer::{Candidate, Flag, Resolution, ReviewItem, Reviewer};
use super::tools::{ToolContext, ToolError};
use super::{Question, ReviewDecision, Subject, Verdict, ALTERNATIVES_K};
use crate::matchers::Scorer;
use crate::provenance::RecordKind;

/// Reviews every column match and applies the outcome to the session.
pub fn review_column_matches(
    ctx: &mut ToolContext<'_>,
    reviewer: &mut dyn Reviewer,
) -> Result<Vec<ReviewDecision>, ToolError> {
    let items: Vec<ReviewItem> = ctx
        .state
        .column_matches
        .iter()
        .map(|m| ReviewItem {
            subject: Subject::column(&m.source_column),
            attribute: None,
            current: m.target_attribute.clone(),
            score: m.score,
        })
        .collect();
    ctx.state.escalations.retain(|q| q.subject.value.is_some());
    run_review(ctx, reviewer, items, |ctx, item| {
        let source = ctx.state.source.clone().unwrap_or_default();
        let target = ctx.state.schema.name().to_string();
        let method = ctx.state.method.to_string();
        let result = ctx.invoke(
            "top_matches",
            json!({
                "source": source,
                "column": item.subject.column,
                "target": target,
                "k": ALTERNATIVES_K,
                "method": method,
            }),
        )?;
        Ok(serde_json::from_value(result).unwrap_or_default())
    })
}

/// Reviews every value match of every non-skipped value table.
pub fn review_value_matches(
    ctx: &mut ToolContext<'_>,
    reviewer: &mut dyn Reviewer,
) -> Result<Vec<ReviewDecision>, ToolError> {
    let items: Vec<ReviewItem> = ctx
        .state
        .value_tables
        .iter()
        .filter(|t| !t.skipped)
        .flat_map(|t| {
            t.matches.iter().map(|m| ReviewItem {
                subject: Subject::value(&t.source_column, &m.source_value),
                attribute: Some(t.target_attribute.clone()),
                current: m.target_value.clone(),
                score: m.score,
            })
        })
        .collect();
    ctx.state.escalations.retain(|q| q.subject.value.is_none());
    let mut domains: Vec<(String, Vec<String>)> = Vec::new();
    run_review(ctx, reviewer, items, move |ctx, item| {
        let attribute = item.attribute.clone().unwrap_or_default();
        let domain = match domains.iter().find(|(a, _)| *a == attribute) {
            Some((_, d)) => d.clone(),
            None => {
                let result = ctx.invoke("domain_of", json!({"attribute": attribute}))?;
                let d: Vec<String> = serde_json::from_value(result["values"].clone()).unwrap_or_default();
                domains.push((attribute, d.clone()));
                d
            }
        };
        let scorer = Scorer::new(ctx.state.method, domain.iter().map(String::as_str).collect());
        let query = item.subject.value.as_deref().unwrap_or_default();
        Ok(scorer
            .rank(query)
            .into_iter()
            .take(ALTERNATIVES_K)
            .map(|(target, score)| Candidate {
                target: target.to_string(),
                score,
            })
            .collect())
    })
}

fn run_review<F>(
    ctx: &mut ToolContext<'_>,
    reviewer: &mut dyn Reviewer,
    items: Vec<ReviewItem>,
    mut alternatives: F,
) -> Result<Vec<ReviewDecision>, ToolError>
where
    F: FnMut(&mut ToolContext<'_>, &ReviewItem) -> Result<Vec<Candidate>, ToolError>,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let flags = match reviewer.flag(&items) {
        Ok(f) if f.len() == items.len() => Ok(f),
        Ok(f) => Err(format!("reviewer returned {} flags for {} items", f.len(), items.len())),
        Err(e) => Err(e.to_string()),
    };
    log_transcript(ctx, reviewer)?;

    // With no usable flags every match goes to the user.
    let (suspect, keep_rationale, failure): (Vec<bool>, Vec<String>, Option<String>) = match flags {
        Ok(flags) => {
            let suspect = flags.iter().map(|f| matches!(f, Flag::Suspect { .. })).collect();
            let rationale = flags
                .into_iter()
                .map(|f| match f {
                    Flag::Keep { rationale } | Flag::Suspect { rationale } => rationale,
                })
                .collect();
            (suspect, rationale, None)
        }
        Err(e) => (vec![true; items.len()], vec![String::new(); items.len()], Some(e)),
    };

    let mut suspects: Vec<(ReviewItem, Vec<Candidate>)> = Vec::new();
    for (item, _) in items.iter().zip(&suspect).filter(|(_, s)| **s) {
        let candidates = alternatives(ctx, item)?;
        suspects.push((item.clone(), candidates));
    }

    let resolutions: Result<Vec<Resolution>, String> = match &failure {
        Some(e) => Err(e.clone()),
        None if suspects.is_empty() => Ok(Vec::new()),
        None => {
            let r = reviewer.resolve(&suspects);
            log_transcript(ctx, reviewer)?;
            match r {
                Ok(r) if r.len() == suspects.len() => Ok(r),
                Ok(r) => Err(format!(
                    "reviewer returned {} resolutions for {} items",
                    r.len(),
                    suspects.len()
                )),
                Err(e) => Err(e.to_string()),
            }
        }
    };
    let resolutions: Vec<Resolution> = match resolutions {
        Ok(r) => r,
        Err(e) => suspects
            .iter()
            .map(|(item, candidates)| Resolution::Escalate {
                question: format!(
                    "The reviewer could not assess {}. Choose a target or keep `{}`.",
                    item.subject,
                    item.current.as_deref().unwrap_or("(none)")
                ),
                suggestion: candidates.first().map(|c| c.target.clone()),
                rationale: format!("reviewer unavailable: {e}"),
            })
            .collect(),
    };

    let mut resolved = suspects.into_iter().zip(resolutions);
    let mut decisions = Vec::with_capacity(items.len());
    for ((item, is_suspect), rationale) in items.iter().zip(&suspect).zip(keep_rationale) {
        let decision = if !is_suspect {
            ReviewDecision {
                subject: item.subject.clone(),
                verdict: Verdict::Keep,
                rationale,
                candidates: Vec::new(),
                suggestion: None,
            }
        } else {
            let ((item, candidates), resolution) = resolved.next().expect("one resolution per suspect");
            to_decision(ctx, &item, candidates, resolution)
        };
        apply_decision(ctx, &item.current, decision.clone())?;
        decisions.push(decision);
    }
    Ok(decisions)
}

fn to_decision(
    ctx: &ToolContext<'_>,
    item: &ReviewItem,
    candidates: Vec<Candidate>,
    resolution: Resolution,
) -> ReviewDecision {
    let (verdict, rationale, suggestion) = match resolution {
        Resolution::Replace { target, rationale } => {
            if item.current.as_deref() == Some(target.as_str()) {
                (Verdict::Keep, rationale, None)
            } else if ctx.state.allowed_targets(&item.subject).contains(&target) {
                (Verdict::Replace { target }, rationale, None)
            } else {
                (
                    Verdict::Escalate {
                        question: format!(
                            "The reviewer proposed `{target}` for {}, which is not a permissible target. Choose a target or keep `{}`.",
                            item.subject,
                            item.current.as_deref().unwrap_or("(none)")
                        ),
                    },
                    format!("rejected out-of-domain replacement `{target}`: {rationale}"),
                    candidates.first().map(|c| c.target.clone()),
                )
            }
        }
        Resolution::Escalate {
            question,
            suggestion,
            rationale,
        } => {
            let suggestion = suggestion.filter(|s| candidates.iter().any(|c| &c.target == s));
            (Verdict::Escalate { question }, rationale, suggestion)
        }
    };
    ReviewDecision {
        subject: item.subject.clone(),
        verdict,
        rationale,
        candidates,
        suggestion,
    }
}

fn apply_decision(
    ctx: &mut ToolContext<'_>,
    current: &Option<String>,
    decision: ReviewDecision,
) -> Result<(), ToolError> {
    let subject = &decision.subject;
    let before = ctx.state.match_json(subject).unwrap_or(Value::Null);
    let mut question_id = None;
    match &decision.verdict {
        Verdict::Keep => {}
        Verdict::Replace { target } => {
            let score = decision
                .candidates
                .iter()
                .find(|c| &c.target == target)
                .map(|c| c.score)
                .unwrap_or_else(|| ctx.state.score_for(subject, target));
            ctx.state
                .install_target(subject, target, score)
                .map_err(|e| ToolError::Failed {
                    tool: "review".into(),
                    message: e.to_string(),
                })?;
        }
        Verdict::Escalate { question } => {
            let id = ctx.state.next_question_id();
            question_id = Some(id.clone());
            ctx.state.escalations.push_back(Question {
                id,
                subject: subject.clone(),
                text: question.clone(),
                current: current.clone(),
                options: decision.candidates.clone(),
                suggestion: decision.suggestion.clone(),
                seq: None,
            });
        }
    }
    let after = ctx.state.match_json(subject).unwrap_or(Value::Null);
    let mut payload = serde_json::to_value(&decision).expect("decision serializes");
    payload["before"] = before;
    payload["after"] = after;
    if let Some(id) = question_id {
        payload["question_id"] = json!(id);
    }
    let parent = ctx.current_call();
    ctx.state.log.append(RecordKind::ReviewerDecision, payload, parent)?;
    Ok(())
}

fn log_transcript(ctx: &mut ToolContext<'_>, reviewer: &mut dyn Reviewer) -> Result<(), ToolError> {
    let exchanges = reviewer.take_transcript();
    if exchanges.is_empty() {
        return Ok(());
    }
    let parent = ctx.current_call();
    ctx.state.log.append(
        RecordKind::Artifact,
        json!({"kind": "llm_exchange", "reviewer": reviewer.name(), "exchanges": exchanges}),
        parent,
    )?;
    Ok(())
}
