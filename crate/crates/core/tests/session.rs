//! Scripted sessions on the dou fixture: outputs, determinism, replay,
//! lineage, restore and termination.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::fixture;
use harmonkit_core::agent::{
    apply_user_answer, Agent, AgentAction, AgentError, Candidate, CorrectionTable, Flag, MockReviewer, Phase, Planner,
    Playbook, Resolution, ReviewItem, Reviewer, ReviewerError, RunOutcome, ScriptedPlanner, SessionConfig,
    SessionState, Subject, Unanswered,
};
use harmonkit_core::mapspec::serialize_spec;
use harmonkit_core::provenance::{
    log_path, parse_log, read_log, replay, restore, trace_value, without_timestamps, ProvenanceLog, RecordKind,
    ReplayError,
};
use serde_json::{json, Value};

fn playbook() -> Playbook {
    Playbook::load(fixture("dou.playbook.json")).unwrap()
}

fn corrections(pb: &Playbook) -> CorrectionTable {
    CorrectionTable::load(pb.corrections_path().unwrap()).unwrap()
}

fn run_with(pb: Playbook, reviewer: Box<dyn Reviewer>, out: &Path) -> (SessionState, Result<RunOutcome, AgentError>) {
    let log = ProvenanceLog::create(out, &pb.session_id).unwrap();
    let config = pb.session_config(out, &reviewer.name());
    let mut state = SessionState::start(config, log).unwrap();
    let mut agent = Agent::new(Box::new(ScriptedPlanner::new(pb.clone())), reviewer);
    let outcome = agent.run(&mut state, &mut |q| pb.answer_for(q));
    (state, outcome)
}

fn run_dou(out: &Path) -> SessionState {
    let pb = playbook();
    let reviewer = Box::new(MockReviewer::with_corrections(corrections(&pb)));
    let (state, outcome) = run_with(pb, reviewer, out);
    match outcome.unwrap() {
        RunOutcome::Finished { .. } => state,
        other => panic!("session did not finish: {other:?}"),
    }
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn dou_log(dir: &Path) -> PathBuf {
    log_path(dir, "dou")
}

#[test]
fn scripted_session_produces_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let state = run_dou(dir.path());
    assert!(start.elapsed() < Duration::from_secs(5));
    assert!(state.step_count <= 20, "{} steps", state.step_count);
    assert_eq!(state.phase(), Phase::Materialized);
    assert_eq!(
        read(dir.path().join("dou.mapping.json")),
        read(fixture("golden/dou.mapping.json"))
    );
    assert_eq!(
        read(dir.path().join("dou_harmonized.csv")),
        read(fixture("golden/dou_harmonized.csv"))
    );

    let hist = state.column_match("Histologic_type").unwrap();
    assert_eq!(hist.target_attribute.as_deref(), Some("primary_diagnosis"));
    assert_eq!(hist.corrected_from(), Some("history_of_tumor_type"));
    let size = state.column_match("Tumor_Size_cm").unwrap();
    assert_eq!(
        size.target_attribute.as_deref(),
        Some("tumor_largest_dimension_diameter")
    );
    let age = state.column_match("Age").unwrap();
    assert_eq!(age.target_attribute.as_deref(), Some("age_at_diagnosis"));
    assert!(age.is_corrected(), "Age is fixed by the user's answer");

    let grades = state.value_table("Histologic_Grade_FIGO").unwrap();
    for (src, tgt) in [("FIGO grade 1", "G1"), ("FIGO grade 2", "G2"), ("FIGO grade 3", "G3")] {
        let m = grades.get(src).unwrap();
        assert_eq!(m.target_value.as_deref(), Some(tgt));
        assert_eq!(m.corrected_from(), Some("Low Grade"));
    }

    let records = state.log.records();
    let questions = records.iter().filter(|r| r.kind == RecordKind::Question).count();
    let answers = records.iter().filter(|r| r.kind == RecordKind::Answer).count();
    assert_eq!((questions, answers), (3, 3));
}

#[test]
fn three_runs_are_byte_identical() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let outputs: Vec<(String, String, String)> = dirs
        .iter()
        .map(|d| {
            run_dou(d.path());
            let records = read_log(dou_log(d.path())).unwrap();
            (
                read(d.path().join("dou.mapping.json")),
                read(d.path().join("dou_harmonized.csv")),
                without_timestamps(&records),
            )
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn replay_reproduces_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    run_dou(dir.path());
    let records = read_log(dou_log(dir.path())).unwrap();
    let spec = replay(&records, None).unwrap();
    assert_eq!(serialize_spec(&spec) + "\n", read(dir.path().join("dou.mapping.json")));
}

fn tampered(dir: &Path, edit: impl Fn(&mut Value) -> bool) -> Vec<harmonkit_core::provenance::ProvenanceRecord> {
    let text = read(dou_log(dir));
    let mut done = false;
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if !done && edit(&mut v) {
                done = true;
            }
            v.to_string()
        })
        .collect();
    assert!(done, "nothing was edited");
    parse_log(&(lines.join("\n") + "\n")).unwrap()
}

#[test]
fn replay_detects_a_tampered_decision() {
    let dir = tempfile::tempdir().unwrap();
    run_dou(dir.path());
    let records = tampered(dir.path(), |v| {
        if v["kind"] == "reviewer_decision" && v["payload"]["subject"]["value"] == "FIGO grade 2" {
            v["payload"]["after"]["target"] = json!("G4");
            v["payload"]["target"] = json!("G4");
            true
        } else {
            false
        }
    });
    match replay(&records, None) {
        Err(ReplayError::Divergence { .. }) => {}
        other => panic!("expected a divergence, got {other:?}"),
    }
}

#[test]
fn replay_detects_a_tampered_tool_result() {
    let dir = tempfile::tempdir().unwrap();
    run_dou(dir.path());
    let records = tampered(dir.path(), |v| {
        if v["kind"] == "tool_result" && v["payload"]["result"][0]["source"] == "Country" {
            v["payload"]["result"][0]["score"] = json!(0.5);
            true
        } else {
            false
        }
    });
    let err = replay(&records, None).unwrap_err();
    assert!(matches!(err, ReplayError::Divergence { .. }), "{err}");
}

#[test]
fn replay_detects_changed_inputs() {
    let inputs = tempfile::tempdir().unwrap();
    for f in [
        "dou_fixture.csv",
        "gdc_fixture.vocab.json",
        "dou_corrections.json",
        "dou.playbook.json",
    ] {
        std::fs::copy(fixture(f), inputs.path().join(f)).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let pb = Playbook::load(inputs.path().join("dou.playbook.json")).unwrap();
    let reviewer = Box::new(MockReviewer::with_corrections(corrections(&pb)));
    run_with(pb, reviewer, out.path()).1.unwrap();
    let records = read_log(dou_log(out.path())).unwrap();
    replay(&records, None).unwrap();

    let csv = inputs.path().join("dou_fixture.csv");
    let text = read(csv.clone()).replacen("Unifocal", "Multifocal", 1);
    std::fs::write(&csv, text).unwrap();
    match replay(&records, None) {
        Err(ReplayError::FixtureChanged { path, .. }) => assert!(path.contains("dou_fixture.csv")),
        other => panic!("expected FixtureChanged, got {other:?}"),
    }
}

#[test]
fn trace_links_values_to_their_decisions() {
    let dir = tempfile::tempdir().unwrap();
    run_dou(dir.path());
    let records = read_log(dou_log(dir.path())).unwrap();

    let g1 = trace_value(&records, "tumor_grade", "G1");
    let kinds: Vec<RecordKind> = g1.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, [RecordKind::ToolCall, RecordKind::ReviewerDecision]);
    assert_eq!(g1[0].payload["tool"], "match_values");
    let decision = &g1[1].payload;
    assert_eq!(
        decision["subject"],
        json!({"column": "Histologic_Grade_FIGO", "value": "FIGO grade 1"})
    );
    assert_eq!(decision["verdict"], "replace");
    assert_eq!(decision["after"]["corrected_from"], "Low Grade");
    assert!(g1.windows(2).all(|w| w[0].seq < w[1].seq));

    let canada = trace_value(&records, "country_of_birth", "Canada");
    assert_eq!(canada.len(), 2, "match_values call and the reviewer's keep");
    assert_eq!(canada[0].payload["tool"], "match_values");
    assert_eq!(canada[1].payload["verdict"], "keep");

    let serous = trace_value(&records, "primary_diagnosis", "Serous cystadenocarcinoma, NOS");
    let kinds: Vec<RecordKind> = serous.iter().map(|r| r.kind).collect();
    assert_eq!(
        kinds,
        [
            RecordKind::ToolCall,
            RecordKind::ReviewerDecision,
            RecordKind::Question,
            RecordKind::Answer,
            RecordKind::UserDecision
        ]
    );

    assert!(trace_value(&records, "tumor_grade", "G4").is_empty());
    assert!(
        trace_value(&records, "tumor_grade", "Low Grade").is_empty(),
        "no value ends up at Low Grade"
    );
    assert!(trace_value(&records, "no_such_attribute", "G1").is_empty());
}

#[test]
fn restore_rebuilds_a_finished_session() {
    let dir = tempfile::tempdir().unwrap();
    let original = run_dou(dir.path());
    let log = ProvenanceLog::open(dou_log(dir.path())).unwrap();
    let restored = restore(log, None, dir.path().to_path_buf()).unwrap();
    assert_eq!(restored.phase(), Phase::Materialized);
    assert_eq!(restored.column_matches, original.column_matches);
    assert_eq!(restored.value_tables, original.value_tables);
    assert_eq!(restored.spec, original.spec);
    assert!(restored.spec_approved);
    assert_eq!(restored.artifacts, original.artifacts);
    assert_eq!(restored.log.len(), original.log.len());
}

#[test]
fn restore_resumes_a_paused_session() {
    let dir = tempfile::tempdir().unwrap();
    let mut pb = playbook();
    pb.answers.columns.clear();
    pb.unanswered = Unanswered::Fail;
    let reviewer = Box::new(MockReviewer::with_corrections(corrections(&pb)));
    let (state, outcome) = run_with(pb.clone(), reviewer, dir.path());
    let RunOutcome::Paused { pending } = outcome.unwrap() else {
        panic!("expected a pause");
    };
    assert_eq!(pending, ["q1"]);
    let before = state.log.len();
    drop(state);

    let log = ProvenanceLog::open(dou_log(dir.path())).unwrap();
    let mut state = restore(log, None, dir.path().to_path_buf()).unwrap();
    assert_eq!(state.log.len(), before);
    assert_eq!(state.phase(), Phase::SchemaMatched);
    assert_eq!(state.pending_questions.len(), 1);
    apply_user_answer(&mut state, "q1", "keep").unwrap();

    let mut agent = Agent::new(
        Box::new(ScriptedPlanner::new(playbook())),
        Box::new(MockReviewer::with_corrections(corrections(&pb))),
    );
    let pb_full = playbook();
    let outcome = agent.run(&mut state, &mut |q| pb_full.answer_for(q)).unwrap();
    assert!(matches!(outcome, RunOutcome::Finished { .. }));
    let records = read_log(dou_log(dir.path())).unwrap();
    assert_eq!(records.len(), state.log.len());
    replay(&records, None).unwrap();
}

struct Stubborn;

impl Planner for Stubborn {
    fn next_action(&mut self, state: &SessionState) -> AgentAction {
        if state.tables.is_empty() {
            AgentAction::ToolCall {
                tool: "load_table".into(),
                args: json!({"path": "dou_fixture.csv", "name": "dou"}),
            }
        } else {
            AgentAction::ToolCall {
                tool: "match_schema".into(),
                args: json!({"source": "dou", "target": "gdc"}),
            }
        }
    }
}

#[test]
fn step_limit_aborts_with_a_complete_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = SessionConfig::new("gdc_fixture.vocab.json");
    config.input_dir = common::fixtures();
    config.output_dir = dir.path().to_path_buf();
    config.max_steps = 8;
    let log = ProvenanceLog::create(dir.path(), "stubborn").unwrap();
    let mut state = SessionState::start(config, log).unwrap();
    let mut agent = Agent::new(Box::new(Stubborn), Box::new(MockReviewer::new(0.5)));
    let err = agent.run(&mut state, &mut |_| None).unwrap_err();
    assert!(matches!(err, AgentError::MaxStepsExceeded(8)), "{err}");
    assert_eq!(state.step_count, 8);

    let records = read_log(log_path(dir.path(), "stubborn")).unwrap();
    let calls: Vec<_> = records.iter().filter(|r| r.kind == RecordKind::ToolCall).collect();
    assert_eq!(calls.len(), 8);
    for c in calls {
        assert!(
            records
                .iter()
                .any(|r| r.kind == RecordKind::ToolResult && r.parent_seq == Some(c.seq)),
            "call {} has no result",
            c.seq
        );
    }
}

#[test]
fn finish_requires_an_approved_spec() {
    struct Quitter;
    impl Planner for Quitter {
        fn next_action(&mut self, _: &SessionState) -> AgentAction {
            AgentAction::Finish { summary: "done".into() }
        }
    }
    let mut config = SessionConfig::new("gdc_fixture.vocab.json");
    config.input_dir = common::fixtures();
    let mut state = SessionState::start(config, ProvenanceLog::in_memory("quit")).unwrap();
    let mut agent = Agent::new(Box::new(Quitter), Box::new(MockReviewer::new(0.5)));
    let err = agent.step(&mut state).unwrap_err();
    assert!(matches!(err, AgentError::FinishRejected(_)), "{err}");
}

struct Broken;

impl Reviewer for Broken {
    fn name(&self) -> String {
        "broken".into()
    }
    fn flag(&mut self, _: &[ReviewItem]) -> Result<Vec<Flag>, ReviewerError> {
        Err(ReviewerError::Transport("connection refused".into()))
    }
    fn resolve(&mut self, _: &[(ReviewItem, Vec<Candidate>)]) -> Result<Vec<Resolution>, ReviewerError> {
        Err(ReviewerError::Transport("connection refused".into()))
    }
}

#[test]
fn reviewer_failure_escalates_every_match() {
    let dir = tempfile::tempdir().unwrap();
    let mut pb = playbook();
    pb.unanswered = Unanswered::Fail;
    pb.answers.columns.clear();
    let (state, outcome) = run_with(pb, Box::new(Broken), dir.path());
    let RunOutcome::Paused { pending } = outcome.unwrap() else {
        panic!("expected a pause");
    };
    assert_eq!(pending.len(), 1, "questions are asked one at a time");
    assert_eq!(state.escalations.len() + state.pending_questions.len(), 11);
    let decisions: Vec<_> = state
        .log
        .records()
        .iter()
        .filter(|r| r.kind == RecordKind::ReviewerDecision)
        .collect();
    assert_eq!(decisions.len(), 11);
    assert!(decisions.iter().all(|r| r.payload["verdict"] == "escalate"));
}

/// Flags everything and proposes a target outside the permissible set.
struct OutOfDomain;

impl Reviewer for OutOfDomain {
    fn name(&self) -> String {
        "out-of-domain".into()
    }
    fn flag(&mut self, items: &[ReviewItem]) -> Result<Vec<Flag>, ReviewerError> {
        Ok(items
            .iter()
            .map(|_| Flag::Suspect {
                rationale: "checking".into(),
            })
            .collect())
    }
    fn resolve(&mut self, items: &[(ReviewItem, Vec<Candidate>)]) -> Result<Vec<Resolution>, ReviewerError> {
        Ok(items
            .iter()
            .map(|_| Resolution::Replace {
                target: "tumour_stage_made_up".into(),
                rationale: "looks right".into(),
            })
            .collect())
    }
}

#[test]
fn out_of_domain_replacement_becomes_an_escalation() {
    let dir = tempfile::tempdir().unwrap();
    let mut pb = playbook();
    pb.unanswered = Unanswered::Fail;
    pb.answers.columns.clear();
    let (state, _) = run_with(pb, Box::new(OutOfDomain), dir.path());
    assert!(state.column_matches.iter().all(|m| !m.is_corrected()));
    let decisions: Vec<_> = state
        .log
        .records()
        .iter()
        .filter(|r| r.kind == RecordKind::ReviewerDecision)
        .collect();
    assert_eq!(decisions.len(), 11);
    for d in decisions {
        assert_eq!(d.payload["verdict"], "escalate");
        assert!(d.payload["rationale"].as_str().unwrap().contains("out-of-domain"));
    }
}

#[test]
fn answer_forms() {
    let dir = tempfile::tempdir().unwrap();
    let mut pb = playbook();
    pb.unanswered = Unanswered::Fail;
    pb.answers.columns.clear();
    let reviewer = Box::new(MockReviewer::with_corrections(corrections(&pb)));
    let (mut state, _) = run_with(pb, reviewer, dir.path());
    let q = state.pending_questions.front().unwrap().clone();
    assert_eq!(q.subject, Subject::column("Histologic_Grade_FIGO"));
    assert!(matches!(
        apply_user_answer(&mut state, &q.id, "nonsense"),
        Err(AgentError::InvalidAnswer { .. })
    ));
    assert!(matches!(
        apply_user_answer(&mut state, "q99", "keep"),
        Err(AgentError::UnknownQuestion(_))
    ));
    // Option 1 is the current target: a keep.
    apply_user_answer(&mut state, &q.id, "1").unwrap();
    assert!(!state.column_match("Histologic_Grade_FIGO").unwrap().is_corrected());
    assert!(matches!(
        apply_user_answer(&mut state, &q.id, "keep"),
        Err(AgentError::QuestionClosed(_))
    ));
}

#[test]
fn answering_with_a_named_option_replaces() {
    let dir = tempfile::tempdir().unwrap();
    let mut pb = playbook();
    pb.unanswered = Unanswered::Fail;
    pb.answers.columns.clear();
    let reviewer = Box::new(MockReviewer::with_corrections(corrections(&pb)));
    let (mut state, _) = run_with(pb, reviewer, dir.path());
    let q = state.pending_questions.front().unwrap().clone();
    let other = q
        .options
        .iter()
        .find(|c| Some(&c.target) != q.current.as_ref())
        .unwrap();
    apply_user_answer(&mut state, &q.id, &other.target).unwrap();
    let m = state.column_match("Histologic_Grade_FIGO").unwrap();
    assert_eq!(m.target_attribute.as_ref(), Some(&other.target));
    assert_eq!(m.corrected_from(), Some("tumor_grade"));
}

#[test]
fn stage_correction_records_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let pb = playbook();
    let mut table = corrections(&pb);
    table
        .values
        .get_mut("FIGO_stage")
        .unwrap()
        .insert("II".into(), "Stage III".into());
    let (state, outcome) = run_with(pb, Box::new(MockReviewer::with_corrections(table)), dir.path());
    outcome.unwrap();
    let m = state.value_table("FIGO_stage").unwrap().get("II").unwrap();
    assert_eq!(m.target_value.as_deref(), Some("Stage III"));
    assert_eq!(m.corrected_from(), Some("Not Reported"));
    let json = serde_json::to_value(m).unwrap();
    assert_eq!(json["corrected"], true);
    assert_eq!(json["corrected_from"], "Not Reported");
}
