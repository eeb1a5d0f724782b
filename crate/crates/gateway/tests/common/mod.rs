#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub const DOU_COLUMNS: [&str; 11] = [
    "Country",
    "Histologic_Grade_FIGO",
    "Histologic_type",
    "FIGO_stage",
    "BMI",
    "Age",
    "Race",
    "Ethnicity",
    "Gender",
    "Tumor_Focality",
    "Tumor_Size_cm",
];

pub const DOU_VALUE_COLUMNS: [&str; 8] = [
    "Country",
    "Histologic_Grade_FIGO",
    "Histologic_type",
    "FIGO_stage",
    "Race",
    "Ethnicity",
    "Gender",
    "Tumor_Focality",
];

/// The reviewed column targets that differ from the lexical matcher.
pub const COLUMN_FIXES: [(&str, &str); 3] = [
    ("Histologic_type", "primary_diagnosis"),
    ("Age", "age_at_diagnosis"),
    ("Tumor_Size_cm", "tumor_largest_dimension_diameter"),
];

/// The reviewed value targets that differ from the lexical matcher.
pub const VALUE_FIXES: [(&str, &str, &str); 4] = [
    ("Histologic_Grade_FIGO", "FIGO grade 1", "G1"),
    ("Histologic_Grade_FIGO", "FIGO grade 2", "G2"),
    ("Histologic_Grade_FIGO", "FIGO grade 3", "G3"),
    ("FIGO_stage", "II", "Stage II"),
];

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub fn read(p: impl AsRef<Path>) -> String {
    let p = p.as_ref();
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

pub fn harmonkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmonkit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HARMONKIT_LLM_URL")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Drives the CLI through match-schema, match-values, build-spec and
/// materialize with the reviewed targets patched in between. Returns the
/// spec text and the harmonized CSV.
pub fn cli_pipeline(dir: &Path) -> (String, String) {
    let src = fixture("dou_fixture.csv");
    let vocab = fixture("gdc_fixture.vocab.json");
    let cols = DOU_COLUMNS.join(",");
    let ok = |args: &[&str]| {
        let o = harmonkit(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&[
        "match-schema",
        "--source",
        path_str(&src),
        "--vocab",
        path_str(&vocab),
        "--columns",
        &cols,
        "--out",
        "ms.json",
    ]);
    let mut ms = read_json(dir.join("ms.json"));
    for m in ms.as_array_mut().unwrap() {
        if let Some((_, t)) = COLUMN_FIXES.iter().find(|(c, _)| m["source"] == *c) {
            m["target"] = json!(t);
        }
    }
    std::fs::write(dir.join("ms.json"), serde_json::to_string_pretty(&ms).unwrap()).unwrap();
    ok(&[
        "match-values",
        "--source",
        path_str(&src),
        "--vocab",
        path_str(&vocab),
        "--mapping",
        "ms.json",
        "--out",
        "mv.json",
    ]);
    let mut mv = read_json(dir.join("mv.json"));
    for table in mv.as_array_mut().unwrap() {
        let col = table["source_column"].as_str().unwrap().to_string();
        for m in table["matches"].as_array_mut().unwrap() {
            if let Some((_, _, t)) = VALUE_FIXES.iter().find(|(c, v, _)| *c == col && m["source"] == *v) {
                m["target"] = json!(t);
            }
        }
    }
    std::fs::write(dir.join("mv.json"), serde_json::to_string_pretty(&mv).unwrap()).unwrap();
    ok(&[
        "build-spec",
        "--matches",
        "ms.json",
        "--values",
        "mv.json",
        "--out",
        "spec.json",
    ]);
    ok(&[
        "materialize",
        "--spec",
        "spec.json",
        "--input",
        path_str(&src),
        "--out",
        "out.csv",
    ]);
    (read(dir.join("spec.json")), read(dir.join("out.csv")))
}

pub fn start_server(provenance_dir: &Path) -> harmonkit::server::ServerHandle {
    let config = harmonkit::config::ServerConfig {
        port: 0,
        vocab: Some(fixture("gdc_fixture.vocab.json")),
        provenance_dir: provenance_dir.to_path_buf(),
        ..Default::default()
    };
    harmonkit::server::spawn(config).expect("server starts")
}

/// A blocking JSON client rooted at a server URL.
pub struct Api {
    pub base: String,
    client: reqwest::blocking::Client,
}

impl Api {
    pub fn new(base: String) -> Self {
        Self {
            base,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn text(&self, path: &str) -> (u16, String) {
        let r = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        (r.status().as_u16(), r.text().unwrap())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn ok(&self, path: &str, body: Value) -> Value {
        let (status, v) = self.post(path, body);
        assert!(status == 200 || status == 201, "POST {path}: {status} {v}");
        v
    }
}

/// Creates session `id` and brings it to `schema_matched` on the dou fixture.
pub fn http_schema_matched(api: &Api, id: &str) {
    api.ok("/sessions", json!({"session_id": id, "prompt": "harmonize dou"}));
    api.ok(
        &format!("/sessions/{id}/tables"),
        json!({"path": fixture("dou_fixture.csv"), "name": "dou", "columns": DOU_COLUMNS}),
    );
    api.ok(&format!("/sessions/{id}/match-schema"), json!({}));
}

/// Applies the reviewed column decisions and matches values.
pub fn http_values_matched(api: &Api, id: &str) {
    for (column, target) in COLUMN_FIXES {
        api.ok(
            &format!("/sessions/{id}/decisions"),
            json!({"subject": {"column": column}, "verdict": "replace", "target": target}),
        );
    }
    api.ok(
        &format!("/sessions/{id}/match-values"),
        json!({"columns": DOU_VALUE_COLUMNS}),
    );
}

/// Applies the reviewed value decisions, builds the spec and materializes.
/// Returns the spec and CSV artifacts as served.
pub fn http_finish(api: &Api, id: &str) -> (String, String) {
    for (column, value, target) in VALUE_FIXES {
        api.ok(
            &format!("/sessions/{id}/decisions"),
            json!({"subject": {"column": column, "value": value}, "verdict": "replace", "target": target}),
        );
    }
    let spec = api.ok(&format!("/sessions/{id}/spec"), json!({}));
    assert_eq!(spec["approved"], true, "{spec}");
    api.ok(&format!("/sessions/{id}/materialize"), json!({}));
    let (s1, spec) = api.text(&format!("/sessions/{id}/artifacts/dou.mapping.json"));
    let (s2, csv) = api.text(&format!("/sessions/{id}/artifacts/dou_harmonized.csv"));
    assert_eq!((s1, s2), (200, 200));
    (spec, csv)
}
