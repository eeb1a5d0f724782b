//! The `harmonkit` binary: exit codes, pipelines and scripted sessions.

mod common;

use common::*;
use serde_json::{json, Value};

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(harmonkit(&[], dir.path()).status.code(), Some(2));
    assert_eq!(harmonkit(&["match-schema"], dir.path()).status.code(), Some(2));
    assert_eq!(harmonkit(&["frobnicate"], dir.path()).status.code(), Some(2));
    let src = fixture("dou_fixture.csv");
    let vocab = fixture("gdc_fixture.vocab.json");
    let o = harmonkit(
        &[
            "top-matches",
            "--source",
            path_str(&src),
            "--vocab",
            path_str(&vocab),
            "--column",
            "Age",
            "--k",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn unreadable_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = fixture("gdc_fixture.vocab.json");
    let o = harmonkit(
        &["match-schema", "--source", "nope.csv", "--vocab", path_str(&vocab)],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));
}

#[test]
fn match_schema_shows_the_lexical_traps() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("dou_fixture.csv");
    let vocab = fixture("gdc_fixture.vocab.json");
    let cols = DOU_COLUMNS.join(",");
    let o = harmonkit(
        &[
            "match-schema",
            "--source",
            path_str(&src),
            "--vocab",
            path_str(&vocab),
            "--columns",
            &cols,
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let matches: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let target = |c: &str| matches.as_array().unwrap().iter().find(|m| m["source"] == c).unwrap()["target"].clone();
    assert_eq!(matches.as_array().unwrap().len(), 11);
    assert_eq!(target("Histologic_type"), json!("history_of_tumor_type"));
    assert_eq!(target("Tumor_Size_cm"), json!("tumor_grade"));
    assert_eq!(target("FIGO_stage"), json!("figo_stage"));
    assert_ne!(target("Age"), json!("age_at_diagnosis"));
}

#[test]
fn top_matches_ranks_k_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("dou_fixture.csv");
    let vocab = fixture("gdc_fixture.vocab.json");
    let o = harmonkit(
        &[
            "top-matches",
            "--source",
            path_str(&src),
            "--vocab",
            path_str(&vocab),
            "--column",
            "Histologic_type",
            "--k",
            "3",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ranked: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ranked = ranked.as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    assert_eq!(ranked[0]["target"], "history_of_tumor_type");
    let scores: Vec<f64> = ranked.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn unreviewed_matches_do_not_compile() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("dou_fixture.csv");
    let vocab = fixture("gdc_fixture.vocab.json");
    let cols = DOU_COLUMNS.join(",");
    let o = harmonkit(
        &[
            "match-schema",
            "--source",
            path_str(&src),
            "--vocab",
            path_str(&vocab),
            "--columns",
            &cols,
            "--out",
            "ms.json",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    // Age and FIGO_stage both land on figo_stage.
    let o = harmonkit(&["build-spec", "--matches", "ms.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("figo_stage"), "{}", stderr(&o));
}

#[test]
fn reviewed_pipeline_reproduces_the_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, csv) = cli_pipeline(dir.path());
    assert_eq!(spec, read(fixture("golden/dou.mapping.json")));
    assert_eq!(csv, read(fixture("golden/dou_harmonized.csv")));

    let o = harmonkit(
        &[
            "validate-spec",
            "--spec",
            "spec.json",
            "--source",
            path_str(&fixture("dou_fixture.csv")),
            "--vocab",
            path_str(&fixture("gdc_fixture.vocab.json")),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn materialize_names_the_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let o = harmonkit(
        &[
            "materialize",
            "--spec",
            path_str(&fixture("golden/dou.mapping.json")),
            "--input",
            path_str(&fixture("grade_fixture.csv")),
            "--out",
            "out.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`Country`"), "{}", stderr(&o));
    assert!(!dir.path().join("out.csv").exists());
}

#[test]
fn validate_spec_reports_out_of_domain_targets() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = read_json(fixture("golden/dou.mapping.json"));
    let entries = spec.as_array_mut().unwrap();
    let grade = entries
        .iter_mut()
        .find(|e| e["source"] == "Histologic_Grade_FIGO")
        .unwrap();
    grade["matches"][0][1] = json!("G9");
    std::fs::write(
        dir.path().join("bad.json"),
        serde_json::to_string_pretty(&spec).unwrap(),
    )
    .unwrap();
    let o = harmonkit(
        &[
            "validate-spec",
            "--spec",
            "bad.json",
            "--source",
            path_str(&fixture("dou_fixture.csv")),
            "--vocab",
            path_str(&fixture("gdc_fixture.vocab.json")),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("G9"), "{}", stdout(&o));
}

#[test]
fn union_stacks_both_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let o = harmonkit(
        &[
            "union",
            "--out",
            "all.csv",
            path_str(&fixture("cohort_ucec.csv")),
            path_str(&fixture("cohort_ucec2.csv")),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(dir.path().join("all.csv"));
    let table = harmonkit_core::Table::from_csv_str("all", &text).unwrap();
    assert_eq!(table.num_rows(), 343);
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for (task, file) in [
        ("schema_matching", "dou_truth.schema.json"),
        ("value_mapping", "dou_truth.values.json"),
    ] {
        let truth = fixture(file);
        let o = harmonkit(
            &[
                "eval",
                "--task",
                task,
                "--pred",
                path_str(&truth),
                "--truth",
                path_str(&truth),
                "--json",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
        for metric in ["accuracy", "precision", "recall", "f1"] {
            assert_eq!(report[metric], 1.0, "{task} {metric}");
        }
    }
    let o = harmonkit(&["eval", "--task", "fuzzy", "--pred", "a", "--truth", "b"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn session_run_matches_goldens_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let o = harmonkit(
        &[
            "session",
            "run",
            "--playbook",
            path_str(&fixture("dou.playbook.json")),
            "--mock",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("finished in"));
    assert_eq!(
        read(dir.path().join("dou.mapping.json")),
        read(fixture("golden/dou.mapping.json"))
    );
    assert_eq!(
        read(dir.path().join("dou_harmonized.csv")),
        read(fixture("golden/dou_harmonized.csv"))
    );

    let o = harmonkit(&["session", "replay", "--log", "dou.provenance.jsonl"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), read(fixture("golden/dou.mapping.json")));

    let o = harmonkit(
        &[
            "session",
            "trace",
            "--log",
            "dou.provenance.jsonl",
            "--attribute",
            "tumor_grade",
            "--value",
            "G1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let kinds: Vec<String> = stdout(&o)
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["kind"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds, ["tool_call", "reviewer_decision"]);
}

#[test]
fn session_run_stops_at_the_step_limit() {
    let dir = tempfile::tempdir().unwrap();
    let o = harmonkit(
        &[
            "session",
            "run",
            "--playbook",
            path_str(&fixture("dou.playbook.json")),
            "--mock",
            "--max-steps",
            "8",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains('8'), "{}", stderr(&o));
    assert!(!dir.path().join("dou_harmonized.csv").exists());
    assert!(dir.path().join("dou.provenance.jsonl").exists());
}
