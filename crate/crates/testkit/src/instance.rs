//! Random matching instances and their comparison with the oracle.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use harmonkit_core::mapspec::{MappingEntry, MappingSpec, OnMissing};
use harmonkit_core::matchers::{match_schema, match_values, top_matches, MatchMethod};
use harmonkit_core::table::Table;
use harmonkit_core::vocab::{Domain, TargetAttribute, TargetSchema};
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::{random_names, rng, OracleCorpus};

pub struct Instance {
    pub table: Table,
    pub schema: TargetSchema,
    pub attrs: Vec<String>,
    pub domains: BTreeMap<String, Vec<String>>,
}

/// Up to 30 source columns, up to 30 enumerated attributes with up to 100
/// values each, and a few rows drawn from a shared pool of names.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n_cols = r.random_range(1..=30);
    let n_attrs = r.random_range(1..=30);
    let columns = random_names(&mut r, n_cols);
    let attrs = random_names(&mut r, n_attrs);
    let mut domains = BTreeMap::new();
    let attributes = attrs
        .iter()
        .map(|a| {
            let size = r.random_range(1..=100);
            let values = random_names(&mut r, size);
            domains.insert(a.clone(), values.clone());
            TargetAttribute {
                name: a.clone(),
                description: String::new(),
                domain: Domain::Enumerated(values),
            }
        })
        .collect();
    let schema = TargetSchema::new("random", attributes).unwrap();
    let pool = random_names(&mut r, 60);
    let n_rows = r.random_range(0..=25);
    let rows = (0..n_rows)
        .map(|_| {
            columns
                .iter()
                .map(|_| {
                    if r.random_bool(0.1) {
                        None
                    } else {
                        Some(pool.choose(&mut r).unwrap().clone())
                    }
                })
                .collect()
        })
        .collect();
    Instance {
        table: Table::new("src", columns, rows).unwrap(),
        schema,
        attrs,
        domains,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleCheck {
    pub compared: usize,
    pub max_delta: f64,
    /// Time spent in the library; the oracle is deliberately slow.
    pub library_time: Duration,
}

struct Checker<'a> {
    tol: f64,
    ctx: &'a str,
    stats: OracleCheck,
}

impl Checker<'_> {
    fn score(&mut self, what: &str, got: f64, want: f64) -> Result<(), String> {
        let d = (got - want).abs();
        self.stats.compared += 1;
        self.stats.max_delta = self.stats.max_delta.max(d);
        if d > self.tol {
            return Err(format!("{}: {what} scored {got}, oracle {want}", self.ctx));
        }
        Ok(())
    }

    /// `got` is the oracle's best candidate or ties with it, and abstains
    /// only when nothing scores.
    fn best(
        &mut self,
        query: &str,
        got: Option<&str>,
        score: f64,
        oracle: &OracleCorpus,
        corpus: &[String],
    ) -> Result<(), String> {
        let ranked = oracle.rank(query, corpus);
        let (best_name, best) = &ranked[0];
        self.score(&format!("best for `{query}`"), score, *best)?;
        match got {
            None if *best != 0.0 => Err(format!(
                "{}: `{query}` abstained, oracle best {best_name}={best}",
                self.ctx
            )),
            Some(name) if name != best_name => {
                self.score(&format!("`{query}` -> `{name}`"), oracle.tfidf(query, name), *best)
            }
            _ => Ok(()),
        }
    }
}

/// Runs match_schema, top_matches and match_values on `inst` and checks
/// every score and choice against the oracle within `tol`.
pub fn check_instance(inst: &Instance, tol: f64, ctx: &str) -> Result<OracleCheck, String> {
    let method = MatchMethod::default();
    let t0 = Instant::now();
    let matches = match_schema(&inst.table, &inst.schema, method).map_err(|e| e.to_string())?;
    let col = &inst.table.columns()[0];
    let ranked = top_matches(&inst.table, col, &inst.schema, inst.attrs.len(), method).map_err(|e| e.to_string())?;
    let pairs: Vec<(String, String)> = inst
        .table
        .columns()
        .iter()
        .zip(inst.attrs.iter().cycle())
        .map(|(c, a)| (c.clone(), a.clone()))
        .collect();
    let tables = match_values(&inst.table, &inst.schema, &pairs, method).map_err(|e| e.to_string())?;
    let library_time = t0.elapsed();

    let mut c = Checker {
        tol,
        ctx,
        stats: OracleCheck {
            library_time,
            ..Default::default()
        },
    };
    let attr_oracle = OracleCorpus::new(&inst.attrs, 3);
    for m in &matches {
        c.best(
            &m.source_column,
            m.target_attribute.as_deref(),
            m.score,
            &attr_oracle,
            &inst.attrs,
        )?;
    }

    if ranked.len() != inst.attrs.len() {
        return Err(format!(
            "{ctx}: top_matches returned {} of {}",
            ranked.len(),
            inst.attrs.len()
        ));
    }
    for w in ranked.windows(2) {
        if w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 >= w[1].0) {
            return Err(format!("{ctx}: ranking out of order at {} / {}", w[0].0, w[1].0));
        }
    }
    for (name, score) in &ranked {
        c.score(&format!("`{col}` -> `{name}`"), *score, attr_oracle.tfidf(col, name))?;
    }

    for t in &tables {
        let domain = &inst.domains[&t.target_attribute];
        let oracle = OracleCorpus::new(domain, 3);
        let distinct = inst
            .table
            .distinct_values(&t.source_column)
            .map_err(|e| e.to_string())?;
        if t.matches.len() != distinct.len() {
            return Err(format!(
                "{ctx}: {} value matches for {} distinct values",
                t.matches.len(),
                distinct.len()
            ));
        }
        for m in &t.matches {
            if m.target_value.is_none() {
                return Err(format!("{ctx}: value `{}` abstained", m.source_value));
            }
            c.best(&m.source_value, m.target_value.as_deref(), m.score, &oracle, domain)?;
        }
    }
    Ok(c.stats)
}

const TEXT: &[&str] = &[
    "G1",
    "FIGO grade 1",
    "Stage IIIB",
    "",
    " ",
    "a\"b",
    "back\\slash",
    "é",
    "x/y",
    "NA",
    "null",
    "1.50",
];

fn text(r: &mut impl Rng) -> String {
    if r.random_bool(0.5) {
        TEXT.choose(r).unwrap().to_string()
    } else {
        crate::random_name(r)
    }
}

/// A valid spec with up to 8 entries of every kind and a random policy.
pub fn random_spec(seed: u64) -> MappingSpec {
    let mut r = rng(seed);
    let n = r.random_range(0..=8);
    let entries = (0..n)
        .map(|i| {
            let source = format!("{}{i}", text(&mut r));
            let target = format!("{}{i}", text(&mut r));
            match r.random_range(0..4) {
                0 => {
                    let pairs = (0..r.random_range(0..6))
                        .map(|j| (format!("{}{j}", text(&mut r)), text(&mut r)))
                        .collect();
                    MappingEntry::dictionary(source, target, pairs)
                }
                1 => MappingEntry::rename(source, target),
                2 => MappingEntry::constant(source, target, text(&mut r)),
                _ => MappingEntry::drop(source),
            }
        })
        .collect();
    let on_missing = *[OnMissing::Keep, OnMissing::Null, OnMissing::Error]
        .choose(&mut r)
        .unwrap();
    MappingSpec::new(entries, on_missing).expect("generated spec is valid")
}

/// A table over a random non-empty subset of `pool`, with up to 6 rows and
/// some null cells.
pub fn random_table(r: &mut impl Rng, name: &str, pool: &[&str]) -> Table {
    let mut columns: Vec<String> = pool
        .iter()
        .filter(|_| r.random_bool(0.6))
        .map(|c| c.to_string())
        .collect();
    if columns.is_empty() {
        columns.push(pool.choose(r).unwrap().to_string());
    }
    let rows = (0..r.random_range(0..=6))
        .map(|_| columns.iter().map(|_| r.random_bool(0.85).then(|| text(r))).collect())
        .collect();
    Table::new(name, columns, rows).unwrap()
}
