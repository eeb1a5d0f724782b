//! Reviewer backed by an OpenAI-compatible chat-completions endpoint.

use std::time::Duration;

use serde_json::{json, Value};

use super::reviewer::{Candidate, Flag, Resolution, ReviewItem, Reviewer, ReviewerError};
use super::tools::TOOLS_RESOURCE;

pub const ENV_URL: &str = "HARMONKIT_LLM_URL";
pub const ENV_MODEL: &str = "HARMONKIT_LLM_MODEL";
pub const ENV_KEY: &str = "HARMONKIT_LLM_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` is appended.
    pub url: String,
    pub model: String,
    pub key: Option<String>,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn from_env() -> Result<Self, ReviewerError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let url = var(ENV_URL).ok_or_else(|| ReviewerError::Config(format!("{ENV_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| ReviewerError::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(Self {
            url,
            model,
            key: var(ENV_KEY),
            timeout: Duration::from_secs(60),
        })
    }
}

pub struct RemoteReviewer {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    prompts: Value,
    transcript: Vec<Value>,
}

impl RemoteReviewer {
    pub fn new(config: RemoteConfig) -> Result<Self, ReviewerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ReviewerError::Config(e.to_string()))?;
        let resource: Value = serde_json::from_str(TOOLS_RESOURCE).expect("tools.json is valid");
        Ok(Self {
            config,
            client,
            prompts: resource["reviewer"].clone(),
            transcript: Vec::new(),
        })
    }

    /// Sends one exchange forcing a call to `tool` and returns its parsed arguments.
    fn call(&mut self, prompt_key: &str, tool_key: &str, user: Value) -> Result<Value, ReviewerError> {
        let tool = &self.prompts[tool_key];
        let tool_name = tool["name"].as_str().unwrap_or_default().to_string();
        let request = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": self.prompts[prompt_key]},
                {"role": "user", "content": user.to_string()},
            ],
            "tools": [{"type": "function", "function": tool}],
            "tool_choice": {"type": "function", "function": {"name": tool_name}},
        });
        let url = format!("{}/chat/completions", self.config.url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&request);
        if let Some(key) = &self.config.key {
            builder = builder.bearer_auth(key);
        }
        let outcome = builder
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json::<Value>());
        let response = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.transcript
                    .push(json!({"request": request, "error": e.to_string()}));
                return Err(ReviewerError::Transport(e.to_string()));
            }
        };
        self.transcript.push(json!({"request": request, "response": response}));
        let call = &response["choices"][0]["message"]["tool_calls"][0]["function"];
        if call["name"].as_str() != Some(tool_name.as_str()) {
            return Err(ReviewerError::Protocol(format!("expected a call to `{tool_name}`")));
        }
        let args = call["arguments"]
            .as_str()
            .ok_or_else(|| ReviewerError::Protocol("tool call has no arguments".into()))?;
        serde_json::from_str(args).map_err(|e| ReviewerError::Protocol(format!("bad tool arguments: {e}")))
    }
}

/// Collects `list` entries into one slot per index.
fn by_index(list: &Value, n: usize) -> Result<Vec<Value>, ReviewerError> {
    let entries = list
        .as_array()
        .ok_or_else(|| ReviewerError::Protocol("expected an array".into()))?;
    let mut slots = vec![Value::Null; n];
    for e in entries {
        let i = e["index"]
            .as_u64()
            .filter(|&i| (i as usize) < n)
            .ok_or_else(|| ReviewerError::Protocol(format!("bad index in {e}")))?;
        slots[i as usize] = e.clone();
    }
    if let Some(i) = slots.iter().position(Value::is_null) {
        return Err(ReviewerError::Protocol(format!("no entry for item {i}")));
    }
    Ok(slots)
}

fn item_json(index: usize, item: &ReviewItem) -> Value {
    let mut v = json!({
        "index": index,
        "column": item.subject.column,
        "current": item.current,
        "score": item.score,
    });
    if let Some(value) = &item.subject.value {
        v["value"] = json!(value);
    }
    if let Some(a) = &item.attribute {
        v["attribute"] = json!(a);
    }
    v
}

impl Reviewer for RemoteReviewer {
    fn name(&self) -> String {
        format!("remote({})", self.config.model)
    }

    fn flag(&mut self, items: &[ReviewItem]) -> Result<Vec<Flag>, ReviewerError> {
        let payload = json!({"items": items.iter().enumerate().map(|(i, it)| item_json(i, it)).collect::<Vec<_>>()});
        let args = self.call("flag_prompt", "flag_tool", payload)?;
        Ok(by_index(&args["flags"], items.len())?
            .into_iter()
            .map(|f| {
                let rationale = f["rationale"].as_str().unwrap_or_default().to_string();
                if f["suspect"].as_bool().unwrap_or(false) {
                    Flag::Suspect { rationale }
                } else {
                    Flag::Keep { rationale }
                }
            })
            .collect())
    }

    fn resolve(&mut self, items: &[(ReviewItem, Vec<Candidate>)]) -> Result<Vec<Resolution>, ReviewerError> {
        let payload = json!({"items": items
            .iter()
            .enumerate()
            .map(|(i, (it, cands))| {
                let mut v = item_json(i, it);
                v["alternatives"] = json!(cands);
                v
            })
            .collect::<Vec<_>>()});
        let args = self.call("resolve_prompt", "resolve_tool", payload)?;
        by_index(&args["resolutions"], items.len())?
            .into_iter()
            .map(|r| {
                let rationale = r["rationale"].as_str().unwrap_or_default().to_string();
                match (r["action"].as_str(), r["target"].as_str()) {
                    (Some("replace"), Some(t)) => Ok(Resolution::Replace {
                        target: t.to_string(),
                        rationale,
                    }),
                    (Some("escalate"), target) => Ok(Resolution::Escalate {
                        question: r["question"]
                            .as_str()
                            .unwrap_or("Please choose the correct target.")
                            .to_string(),
                        suggestion: target.map(str::to_string),
                        rationale,
                    }),
                    _ => Err(ReviewerError::Protocol(format!("bad resolution {r}"))),
                }
            })
            .collect()
    }

    fn take_transcript(&mut self) -> Vec<Value> {
        std::mem::take(&mut self.transcript)
    }
}
