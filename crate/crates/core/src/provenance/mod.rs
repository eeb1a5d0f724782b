//! Append-only session history, stored as JSON Lines.
//!
//! Each record is persisted before the action that produced it returns, so a
//! session that fails to write aborts instead of continuing unlogged.

mod replay;
mod trace;

pub use replay::{replay, restore, ReplayError};
pub use trace::trace_value;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LOG_SUFFIX: &str = ".provenance.jsonl";

#[derive(Debug, Error)]
pub enum ProvenanceError {
    #[error("sequence gap: expected seq {expected}, got {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("record {seq}: parent_seq {parent} is not earlier")]
    BadParent { seq: u64, parent: u64 },
    #[error("record {seq} belongs to session `{found}`, log is `{expected}`")]
    WrongSession { seq: u64, expected: String, found: String },
    #[error("provenance I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    UserPrompt,
    ToolCall,
    ToolResult,
    ReviewerDecision,
    UserDecision,
    Question,
    Answer,
    Artifact,
}

/// One event. Equality ignores the timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub seq: u64,
    pub session_id: String,
    pub ts: String,
    pub kind: RecordKind,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_seq: Option<u64>,
}

impl PartialEq for ProvenanceRecord {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
            && self.session_id == other.session_id
            && self.kind == other.kind
            && self.payload == other.payload
            && self.parent_seq == other.parent_seq
    }
}

impl ProvenanceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn system_clock() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// A session's record sequence, optionally mirrored to a JSONL file.
pub struct ProvenanceLog {
    session_id: String,
    records: Vec<ProvenanceRecord>,
    sink: Option<(PathBuf, File)>,
    clock: fn() -> String,
}

impl std::fmt::Debug for ProvenanceLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProvenanceLog")
            .field("session_id", &self.session_id)
            .field("records", &self.records.len())
            .field("path", &self.path())
            .finish()
    }
}

impl ProvenanceLog {
    pub fn in_memory(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            records: Vec::new(),
            sink: None,
            clock: system_clock,
        }
    }

    /// Creates (truncating) `<dir>/<session_id>.provenance.jsonl`.
    pub fn create(dir: impl AsRef<Path>, session_id: impl Into<String>) -> Result<Self, ProvenanceError> {
        let session_id = session_id.into();
        let path = log_path(dir.as_ref(), &session_id);
        let file = File::create(&path).map_err(|source| ProvenanceError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Self {
            session_id,
            records: Vec::new(),
            sink: Some((path, file)),
            clock: system_clock,
        })
    }

    /// Reopens an existing log for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProvenanceError> {
        let path = path.as_ref().to_path_buf();
        let records = read_log(&path)?;
        let session_id = records
            .first()
            .map(|r| r.session_id.clone())
            .or_else(|| {
                path.file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(LOG_SUFFIX))
                    .map(str::to_string)
            })
            .unwrap_or_default();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| ProvenanceError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            session_id,
            records,
            sink: Some((path, file)),
            clock: system_clock,
        })
    }

    pub fn with_clock(mut self, clock: fn() -> String) -> Self {
        self.clock = clock;
        self
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn records(&self) -> &[ProvenanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    /// Appends a record with the next sequence number and returns that number.
    pub fn append(
        &mut self,
        kind: RecordKind,
        payload: Value,
        parent_seq: Option<u64>,
    ) -> Result<u64, ProvenanceError> {
        let record = ProvenanceRecord {
            seq: self.next_seq(),
            session_id: self.session_id.clone(),
            ts: (self.clock)(),
            kind,
            payload,
            parent_seq,
        };
        self.append_record(record)
    }

    /// Appends a fully formed record; its `seq` must be exactly the next one.
    pub fn append_record(&mut self, record: ProvenanceRecord) -> Result<u64, ProvenanceError> {
        let expected = self.next_seq();
        if record.seq != expected {
            return Err(ProvenanceError::SequenceGap {
                expected,
                found: record.seq,
            });
        }
        if record.session_id != self.session_id {
            return Err(ProvenanceError::WrongSession {
                seq: record.seq,
                expected: self.session_id.clone(),
                found: record.session_id,
            });
        }
        if let Some(parent) = record.parent_seq {
            if parent >= record.seq {
                return Err(ProvenanceError::BadParent {
                    seq: record.seq,
                    parent,
                });
            }
        }
        if let Some((path, file)) = &mut self.sink {
            let mut line = record.to_json_line();
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| ProvenanceError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

pub fn log_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}{LOG_SUFFIX}"))
}

/// Parses JSONL text and checks sequence and parent invariants.
pub fn parse_log(text: &str) -> Result<Vec<ProvenanceRecord>, ProvenanceError> {
    let mut records: Vec<ProvenanceRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ProvenanceRecord = serde_json::from_str(line).map_err(|e| ProvenanceError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let expected = records.len() as u64;
        if record.seq != expected {
            return Err(ProvenanceError::SequenceGap {
                expected,
                found: record.seq,
            });
        }
        if let Some(parent) = record.parent_seq {
            if parent >= record.seq {
                return Err(ProvenanceError::BadParent {
                    seq: record.seq,
                    parent,
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<ProvenanceRecord>, ProvenanceError> {
    let path = path.as_ref();
    let io = |source| ProvenanceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io)?);
        text.push('\n');
    }
    parse_log(&text)
}

/// JSONL with every `ts` blanked, for comparing logs across runs.
pub fn without_timestamps(records: &[ProvenanceRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.ts.clear();
            r.to_json_line() + "\n"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequential_appends_and_gap() {
        let mut log = ProvenanceLog::in_memory("s");
        for i in 0..3 {
            assert_eq!(log.append(RecordKind::ToolCall, json!({"i": i}), None).unwrap(), i);
        }
        let gap = ProvenanceRecord {
            seq: 4,
            session_id: "s".into(),
            ts: String::new(),
            kind: RecordKind::ToolCall,
            payload: json!({}),
            parent_seq: None,
        };
        assert!(matches!(
            log.append_record(gap),
            Err(ProvenanceError::SequenceGap { expected: 3, found: 4 })
        ));
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn parent_must_precede() {
        let mut log = ProvenanceLog::in_memory("s");
        log.append(RecordKind::ToolCall, json!({}), None).unwrap();
        assert!(log.append(RecordKind::ToolResult, json!({}), Some(1)).is_err());
        assert!(log.append(RecordKind::ToolResult, json!({}), Some(0)).is_ok());
    }

    #[test]
    fn file_round_trip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = ProvenanceLog::create(dir.path(), "abc").unwrap();
        log.append(
            RecordKind::ToolCall,
            json!({"call_id": "c0", "tool": "match_schema", "args": {"target": "gdc"}}),
            None,
        )
        .unwrap();
        let path = log.path().unwrap().to_path_buf();
        assert!(path.ends_with("abc.provenance.jsonl"));
        drop(log);

        let mut log = ProvenanceLog::open(&path).unwrap();
        assert_eq!(log.session_id(), "abc");
        log.append(RecordKind::ToolResult, json!({"call_id": "c0"}), Some(0))
            .unwrap();
        let records = read_log(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].payload["tool"], "match_schema");
        let line = records[1].to_json_line();
        assert!(line.starts_with(r#"{"seq":1,"session_id":"abc","ts":"#));
        assert!(line.ends_with(r#""parent_seq":0}"#));
    }

    #[test]
    fn equality_ignores_timestamps() {
        let mut a = ProvenanceLog::in_memory("s");
        let mut b = ProvenanceLog::in_memory("s").with_clock(|| "1970-01-01T00:00:00Z".into());
        a.append(RecordKind::Question, json!({"q": 1}), None).unwrap();
        b.append(RecordKind::Question, json!({"q": 1}), None).unwrap();
        assert_eq!(a.records(), b.records());
        assert_eq!(without_timestamps(a.records()), without_timestamps(b.records()));
    }

    #[test]
    fn parse_rejects_gaps_and_unknown_keys() {
        let text = "{\"seq\":0,\"session_id\":\"s\",\"ts\":\"\",\"kind\":\"answer\",\"payload\":{}}\n\
                    {\"seq\":2,\"session_id\":\"s\",\"ts\":\"\",\"kind\":\"answer\",\"payload\":{}}\n";
        assert!(matches!(parse_log(text), Err(ProvenanceError::SequenceGap { .. })));
        let text = "{\"seq\":0,\"session_id\":\"s\",\"ts\":\"\",\"kind\":\"answer\",\"payload\":{},\"x\":1}\n";
        assert!(matches!(parse_log(text), Err(ProvenanceError::Parse { .. })));
    }
}
